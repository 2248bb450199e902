mod common;

use proptest::prelude::*;

use common::small_scene_config;
use tsaflow::attention::{rectify, AttentionMatrix};
use tsaflow::grid::{CellGrid, CELL};
use tsaflow::matcher::{global_match, FeatureMap};
use tsaflow::metrics::{downsample_occ_gt, mma, moa, mrd};
use tsaflow::occdet::{estimate_occlusion, non_occluded_mask, OcclusionMap};
use tsaflow::scenegen::{decode_dataset, encode_dataset, generate_scene, SceneConfig};
use tsaflow::tensor::{Graph, Tensor};

fn grid() -> impl Strategy<Value = CellGrid> {
    (1usize..=8, 1usize..=8).prop_map(|(h, w)| CellGrid::new(h, w))
}

/// A row-stochastic matrix over `n` cells from nonnegative raw weights.
fn stochastic(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n * n).prop_map(move |mut m| {
        for row in m.chunks_mut(n) {
            row[0] += 1e-3;
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        m
    })
}

fn grid_and_matrix() -> impl Strategy<Value = (CellGrid, Vec<f64>, Vec<bool>)> {
    grid().prop_flat_map(|c| {
        let n = c.cells();
        (Just(c), stochastic(n), prop::collection::vec(any::<bool>(), n))
    })
}

fn scene_config() -> impl Strategy<Value = SceneConfig> {
    (any::<bool>(), 0u64..10_000).prop_map(|(aligned, seed)| {
        if aligned {
            SceneConfig {
                height: 32,
                width: 32,
                seed,
                ..Default::default()
            }
        } else {
            SceneConfig {
                seed,
                ..small_scene_config(32)
            }
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..40,
        scale in 1.0f64..1e4,
        seed in any::<u64>(),
    ) {
        let mut g = Graph::<f64>::no_grad();
        let x = Tensor::from_fn(&[rows, cols], |i| {
            let h = (i as u64 ^ seed).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11;
            scale * ((h as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
        });
        let v = g.constant(x);
        let s = g.softmax_rows(v, 1.0).unwrap();
        for row in g.data(s).chunks(cols) {
            prop_assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn standardized_channels_have_zero_mean_unit_variance(
        c in 2usize..10,
        plane in 1usize..12,
        data in prop::collection::vec(-5.0f64..5.0, 10 * 12),
    ) {
        let mut g = Graph::<f64>::no_grad();
        let eps = 1e-9;
        let v = g.constant(Tensor::new(vec![c, plane], data[..c * plane].to_vec()).unwrap());
        let y = g.standardize_channels(v, eps).unwrap();
        let x = &data[..c * plane];
        for p in 0..plane {
            let col: Vec<f64> = (0..c).map(|k| g.data(y)[k * plane + p]).collect();
            let mean = col.iter().sum::<f64>() / c as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let xc: Vec<f64> = (0..c).map(|k| x[k * plane + p]).collect();
            let xm = xc.iter().sum::<f64>() / c as f64;
            let xv = xc.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - xv / (xv + eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn moa_of_a_partition_sums_to_one_hundred((cells, m, on) in grid_and_matrix(), q in any::<u64>()) {
        let n = cells.cells();
        let t = Tensor::new(vec![n, n], m).unwrap();
        // Three-way split: confirmed occluded, confirmed non-occluded, neither.
        let class: Vec<u8> = (0..n).map(|i| ((q >> (i % 64)) & 1) as u8 + on[i] as u8).collect();
        let query = vec![true; n];
        let total: f64 = (0..3u8)
            .map(|k| {
                let mask: Vec<bool> = class.iter().map(|&c| c == k).collect();
                if mask.iter().any(|&b| b) { moa(&t, &mask, &query).unwrap() } else { 0.0 }
            })
            .sum();
        prop_assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn mma_and_mrd_are_bounded((cells, m, mut query) in grid_and_matrix()) {
        let n = cells.cells();
        query[0] = true;
        let t = Tensor::new(vec![n, n], m).unwrap();
        let v = mma(&t, &query).unwrap();
        prop_assert!(v >= 100.0 / n as f64 - 1e-9 && v <= 100.0 + 1e-9);
        let diag = ((cells.h - 1).pow(2) as f64 + (cells.w - 1).pow(2) as f64).sqrt();
        let d = mrd(&t, &query, cells).unwrap();
        prop_assert!(d >= 0.0 && d <= diag + 1e-9);
    }

    #[test]
    fn identity_attention_leaves_flow_unchanged(cells in grid(), seed in any::<u32>()) {
        let n = cells.cells();
        let mut g = Graph::<f64>::no_grad();
        let m = AttentionMatrix {
            var: g.constant(Tensor::from_fn(&[n, n], |i| (i / n == i % n) as u8 as f64)),
            cells,
        };
        let flow = Tensor::from_fn(&[2, cells.h, cells.w], |i| ((i as u32).wrapping_mul(seed) % 97) as f64 - 48.0);
        let f = g.constant(flow.clone());
        let r = rectify(&mut g, &m, f).unwrap();
        prop_assert_eq!(g.data(r), flow.data());
    }

    #[test]
    fn correlation_is_permutation_equivariant(
        cells in grid(),
        c in 1usize..6,
        data in prop::collection::vec(-1.0f64..1.0, 2 * 5 * 64),
        perm_seed in any::<u64>(),
    ) {
        let n = cells.cells();
        let f0 = Tensor::new(vec![c, cells.h, cells.w], data[..c * n].to_vec()).unwrap();
        let f1 = Tensor::new(vec![c, cells.h, cells.w], data[c * n..2 * c * n].to_vec()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        // f1p at position j holds f1 at perm[j].
        let f1p = Tensor::from_fn(&[c, cells.h, cells.w], |i| f1.data()[(i / n) * n + perm[i % n]]);
        let mut g = Graph::<f64>::no_grad();
        let fm = |g: &mut Graph<f64>, t: &Tensor<f64>| FeatureMap { var: g.constant(t.clone()), channels: c, cells, scale: CELL };
        let (a, b, bp) = (fm(&mut g, &f0), fm(&mut g, &f1), fm(&mut g, &f1p));
        let plain = global_match(&mut g, &a, &b, 1.0).unwrap().correlation;
        let permuted = global_match(&mut g, &a, &bp, 1.0).unwrap().correlation;
        for i in 0..n {
            for j in 0..n {
                prop_assert!((g.data(permuted)[i * n + j] - g.data(plain)[i * n + perm[j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_occluded_mask_is_monotone(
        cells in grid(),
        om in prop::collection::vec(0.0f64..0.3, 64),
        bumps in prop::collection::vec(0.0f64..0.2, 64),
    ) {
        let n = cells.cells();
        let lo = OcclusionMap { om: Tensor::new(vec![cells.h, cells.w], om[..n].to_vec()).unwrap() };
        let hi = OcclusionMap { om: Tensor::from_fn(&[cells.h, cells.w], |i| om[i] + bumps[i]) };
        let (a, b) = (non_occluded_mask(&lo), non_occluded_mask(&hi));
        for i in 0..n {
            prop_assert!(b.mask.data()[i] <= a.mask.data()[i]);
            prop_assert_eq!(a.mask.data()[i] == 1.0, om[i] < 0.125);
        }
    }

    #[test]
    fn consistent_flows_score_zero(cells in grid(), dx in -2i32..=2, dy in -2i32..=2) {
        // A constant flow whose target stays in bounds everywhere except where
        // it leaves the grid.
        let fwd = Tensor::from_fn(&[2, cells.h, cells.w], |i| if i < cells.cells() { dx as f64 } else { dy as f64 });
        let bwd = fwd.map(|v| -v);
        let om = estimate_occlusion(&fwd, &bwd).unwrap();
        for i in 0..cells.cells() {
            let (x, y) = cells.coord(i);
            let (tx, ty) = (x as i32 + dx, y as i32 + dy);
            let inside = tx >= 0 && ty >= 0 && tx < cells.w as i32 && ty < cells.h as i32;
            if inside {
                prop_assert_eq!(om.om.data()[i], 0.0);
            } else {
                prop_assert!(om.om.data()[i] >= 1.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn occlusion_labels_partition_and_visible_pixels_match(cfg in scene_config()) {
        let s = generate_scene(&cfg, cfg.seed).unwrap();
        let (h, w) = (s.height, s.width);
        let n = h * w;
        for i in 0..n {
            prop_assert_eq!(s.occ_gt[i], s.occ_in[i] | s.occ_out[i]);
            prop_assert!(s.occ_in[i] & s.occ_out[i] == 0);
            if s.occ_gt[i] != 0 {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let tx = (x as i64 + s.flow_gt.data()[i] as i64) as usize;
            let ty = (y as i64 + s.flow_gt.data()[n + i] as i64) as usize;
            let j = ty * w + tx;
            for c in 0..3 {
                prop_assert_eq!(s.frame0.data()[c * n + i], s.frame1.data()[c * n + j]);
            }
            prop_assert_eq!(s.flow_bwd_gt.data()[j], -s.flow_gt.data()[i]);
            prop_assert_eq!(s.flow_bwd_gt.data()[n + j], -s.flow_gt.data()[n + i]);
        }
    }

    #[test]
    fn confirmed_cells_are_quasi_and_disjoint(cfg in scene_config()) {
        let s = generate_scene(&cfg, cfg.seed).unwrap();
        let gt = downsample_occ_gt(&s.occ_gt, s.height, s.width).unwrap();
        for i in 0..gt.cells.cells() {
            let (cx, cy) = gt.cells.coord(i);
            let mut occluded = 0;
            for y in cy * CELL..(cy + 1) * CELL {
                for x in cx * CELL..(cx + 1) * CELL {
                    occluded += s.occ_gt[y * s.width + x] as usize;
                }
            }
            prop_assert!(!(gt.om_o[i] && gt.om_n[i]));
            if gt.om_o[i] {
                prop_assert!(occluded > CELL * CELL / 2);
            }
            if gt.om_n[i] {
                prop_assert!(occluded < CELL * CELL / 2);
            }
        }
    }

    #[test]
    fn datasets_round_trip(cfg in scene_config()) {
        let s = generate_scene(&cfg, cfg.seed).unwrap();
        let bytes = encode_dataset(std::slice::from_ref(&s)).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0], &s);
    }
}
