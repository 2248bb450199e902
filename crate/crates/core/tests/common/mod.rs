#![allow(dead_code)]

pub mod oracles;

use tsaflow::grid::{downsample_flow, CellGrid, NormalGrid};
use tsaflow::harness::{total_loss, TrainConfig};
use tsaflow::model::{forward, param_specs, Ablation, Detached, ModelConfig};
use tsaflow::occdet::OcclusionMap;
use tsaflow::params::{Bound, ParamSpec, ParamStore};
use tsaflow::refiner::RefinerConfig;
use tsaflow::scenegen::{generate_scene, SceneConfig, SceneSample};
use tsaflow::tensor::{Graph, Result, Tensor, Var};

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder_channels: [3, 4, 5],
        occ_channels: 2,
        attention_dim: 4,
        refiner: RefinerConfig {
            hidden: 4,
            context: 3,
            motion: 4,
            radius: 1,
            head: 3,
            iters: 2,
        },
        ..Default::default()
    }
}

pub fn small_scene_config(size: usize) -> SceneConfig {
    SceneConfig {
        height: size,
        width: size,
        sprites_min: 1,
        sprites_max: 2,
        sprite_size_min: 8,
        sprite_size_max: 14,
        max_translation: 6,
        background_max_translation: 2,
        cell_aligned: false,
        ..Default::default()
    }
}

pub fn scene(size: usize, seed: u64) -> SceneSample {
    generate_scene(&small_scene_config(size), seed).unwrap()
}

/// A fixed OM with a mix of confident and occluded cells, keeping the mask
/// constant under parameter perturbation.
pub fn fixed_om(cells: CellGrid) -> OcclusionMap<f64> {
    OcclusionMap {
        om: Tensor::from_fn(&[cells.h, cells.w], |i| if i % 3 == 0 { 0.9 } else { 0.01 * i as f64 }),
    }
}

/// Detached values of a pass at `store` with the fixed OM, for pinning.
pub fn base_detached(store: &ParamStore<f64>, cfg: &TrainConfig, s: &SceneSample) -> Detached<f64> {
    let cells = CellGrid::for_image(s.height, s.width).unwrap();
    let mut g = Graph::no_grad();
    let p = store.bind(&mut g);
    let pin = Detached::occlusion(fixed_om(cells));
    let out = forward(
        &mut g,
        &p,
        &cfg.model,
        &cfg.flags,
        &s.frame0.cast(),
        &s.frame1.cast(),
        Some(&pin),
    )
    .unwrap();
    out.detached(&g)
}

/// Total loss of the whole pipeline as a function of the parameter tensors
/// given in `specs` order, with detached values pinned.
pub fn pipeline_loss(
    g: &mut Graph<f64>,
    vars: &[Var],
    specs: &[ParamSpec],
    cfg: &TrainConfig,
    s: &SceneSample,
    pinned: &Detached<f64>,
) -> Result<Var> {
    let mut p = Bound::default();
    for (spec, &v) in specs.iter().zip(vars) {
        p.insert(spec.key.clone(), v);
    }
    let cells = CellGrid::for_image(s.height, s.width).unwrap();
    let f0: Tensor<f64> = s.frame0.cast();
    let f1: Tensor<f64> = s.frame1.cast();
    let out = forward(g, &p, &cfg.model, &cfg.flags, &f0, &f1, Some(pinned))?;
    let gt: Tensor<f64> = downsample_flow(&s.flow_gt);
    let (loss, _) = total_loss(g, &out, &gt, &NormalGrid::new(cells), cfg)?;
    Ok(loss)
}

pub fn tiny_train_config(flags: Ablation) -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        flags,
        ..Default::default()
    }
}

pub fn specs_for(cfg: &TrainConfig) -> Vec<ParamSpec> {
    param_specs(&cfg.model, &cfg.flags)
}
