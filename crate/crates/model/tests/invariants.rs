use std::collections::BTreeSet;
use std::sync::Arc;

use podseg_core::dataset::{generate_plant, normalize_unit_cube, PlantSpec};
use podseg_core::metrics::point_iou;
use podseg_model::dvfe::{dvfe_forward, init_dvfe, VoxelGroups};
use podseg_model::instance::{
    cluster_points, dual_set_cluster, export_shift_diagnostics, nms, read_instance_predictions,
    read_shift_diagnostics, write_instance_predictions, Proposal, Space,
};
use podseg_model::network::{init_params, training_patches};
use podseg_model::semantic::region_slide;
use podseg_model::train::Trainer;
use podseg_model::window::{
    dual_window_block, init_block, position_encoding, Phase, SubBatchSpec, WindowSet,
};
use podseg_model::{InstanceConfig, ModelConfig, PatchSpec, TrainConfig, Variant};
use podseg_nn::{Ctx, ModelParams, ParamInit, Segments, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<f32> {
    (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Valid rows of one window run through a block with `extra` unrelated
/// rows appended to the voxel tensor.
fn block_rows(params: &ModelParams<f32>, cfg: &ModelConfig, x: &[f32], pe: &[f32], k: usize, extra: usize) -> Vec<f32> {
    let c = cfg.c2;
    let mut rng = ChaCha8Rng::seed_from_u64(extra as u64);
    let mut xs = x.to_vec();
    xs.extend(random(&mut rng, extra, c).iter().map(|v| v * 1e3));
    let mut pes = pe.to_vec();
    pes.extend(random(&mut rng, extra, c));
    let tape = Tape::<f32>::new();
    let ctx = Ctx::new(&tape, params, false);
    let set = WindowSet {
        groups: Arc::new(Segments::from_lists(&[(0..k).collect::<Vec<_>>()])),
        pe: Tensor::matrix(k + extra, c, pes.clone()).unwrap(),
    };
    let xv = tape.constant(Tensor::matrix(k + extra, c, xs).unwrap());
    let pv = tape.constant(set.pe.clone());
    let y = dual_window_block(&ctx, "b", xv, &set, pv, cfg.heads).unwrap();
    tape.with_value(y, |t| t.data()[..k * c].to_vec())
}

#[test]
fn block_output_ignores_padding_level() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::new(11);
    init_block(&mut ParamInit::new(&mut params), "b", &cfg).unwrap();
    let spec = SubBatchSpec::new(Phase::Inference, cfg.window_volume());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [1, 40, 108] {
        let x = random(&mut rng, k, cfg.c2);
        let pe = random(&mut rng, k, cfg.c2);
        let reference = block_rows(&params, &cfg, &x, &pe, k, 0);
        for &pad in &spec.pads {
            let got = block_rows(&params, &cfg, &x, &pe, k, pad - k);
            assert!(
                got.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()),
                "k={k} pad={pad}"
            );
        }
    }
}

#[test]
fn zero_residual_branches_give_identity() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::new(12);
    init_block(&mut ParamInit::new(&mut params), "b", &cfg).unwrap();
    for name in ["b.attn.o.weight", "b.mlp.fc2.weight", "b.mlp.fc2.bias"] {
        params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 7, cfg.c2);
    let pe = random(&mut rng, 7, cfg.c2);
    assert_eq!(block_rows(&params, &cfg, &x, &pe, 7, 0), x);
}

#[test]
fn subbatch_tables_exhaustive() {
    let t = SubBatchSpec::new(Phase::Training, 432);
    let i = SubBatchSpec::new(Phase::Inference, 432);
    assert_eq!(t.pads, vec![108, 216, 389]);
    assert_eq!(i.pads, vec![108, 216, 389, 432]);
    for v in 1..=432 {
        let (train_pad, infer_pad) = match v {
            1..=108 => (108, 108),
            109..=216 => (216, 216),
            217..=389 => (389, 389),
            _ => (389, 432),
        };
        assert_eq!(t.pads[t.bucket_of(v)], train_pad, "training v={v}");
        assert_eq!(i.pads[i.bucket_of(v)], infer_pad, "inference v={v}");
    }
}

#[test]
fn position_encoding_distinct_over_window() {
    let w = [6, 6, 12];
    let offsets: Vec<[usize; 3]> = (0..6)
        .flat_map(|x| (0..6).flat_map(move |y| (0..12).map(move |z| [x, y, z])))
        .collect();
    let pe = position_encoding(&offsets, w, 60).unwrap();
    let rows: BTreeSet<Vec<u64>> = pe.chunks(60).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(rows.len(), 432);
    assert!(pe.iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn dvfe_is_permutation_equivariant() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::<f64>::new(3);
    init_dvfe(&mut ParamInit::new(&mut params), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 12;
    let c0 = cfg.in_channels();
    let x: Vec<f64> = (0..n * c0).map(|_| rng.random_range(-1.0..1.0)).collect();
    let voxel_of = [0, 1, 2, 0, 1, 2, 0, 3, 3, 1, 2, 0];
    let run = |perm: &[usize]| {
        // point k of the permuted cloud is original point perm[k]
        let mut lists = vec![Vec::new(); 4];
        for (k, &p) in perm.iter().enumerate() {
            lists[voxel_of[p]].push(k);
        }
        let groups = VoxelGroups {
            voxels: Arc::new(Segments::from_lists(&lists)),
            point_to_voxel: Arc::new(perm.iter().map(|&p| voxel_of[p]).collect()),
        };
        let xs: Vec<f64> = perm.iter().flat_map(|&p| x[p * c0..(p + 1) * c0].to_vec()).collect();
        let tape = Tape::<f64>::new();
        let ctx = Ctx::new(&tape, &params, false);
        let xv = tape.constant(Tensor::matrix(n, c0, xs).unwrap());
        let y = dvfe_forward(&ctx, &cfg, xv, &groups).unwrap();
        tape.with_value(y, |t| t.data().to_vec())
    };
    let identity: Vec<usize> = (0..n).collect();
    let reversed: Vec<usize> = (0..n).rev().collect();
    let a = run(&identity);
    let b = run(&reversed);
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn region_slide_visits_every_point_twice() {
    let (cloud, _) = generate_plant(&PlantSpec::default().with_seed(5)).unwrap();
    let (cloud, _) = normalize_unit_cube(&cloud).unwrap();
    let spec = PatchSpec::default();
    assert_eq!(spec.stride * 2.0, spec.patch_len);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let r = region_slide(&cloud.coords, &spec, 2, |p| {
        Ok((0..p.indices.len())
            .flat_map(|_| {
                let a: f64 = rng.random();
                [a, 1.0 - a]
            })
            .collect())
    })
    .unwrap();
    assert!(r.visits.iter().all(|v| *v == 2));
    for row in r.mean.chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
    }
}

/// Connected components of points closer than `r`, by all-pairs search.
fn brute_components(coords: &[[f64; 3]], keep: &[bool], r: f64) -> Vec<Vec<usize>> {
    let n = coords.len();
    let mut comp: Vec<usize> = (0..n).collect();
    fn root(c: &mut [usize], mut i: usize) -> usize {
        while c[i] != i {
            i = c[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if keep[i] && keep[j] {
                let d2: f64 = (0..3).map(|a| (coords[i][a] - coords[j][a]).powi(2)).sum();
                if d2 <= r * r {
                    let (a, b) = (root(&mut comp, i), root(&mut comp, j));
                    comp[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in (0..n).filter(|&i| keep[i]) {
        groups.entry(root(&mut comp, i)).or_default().push(i);
    }
    groups.into_values().collect()
}

proptest! {
    #[test]
    fn clustering_matches_all_pairs_search(
        pts in prop::collection::vec((0.0..0.2f64, 0.0..0.2f64, 0.0..0.2f64, 0u32..2), 1..120),
        r in 0.005..0.05f64,
        min_points in 1usize..6,
    ) {
        let coords: Vec<[f64; 3]> = pts.iter().map(|p| [p.0, p.1, p.2]).collect();
        let sem: Vec<u32> = pts.iter().map(|p| p.3).collect();
        let keep: Vec<bool> = sem.iter().map(|s| *s == 1).collect();
        let mut want: Vec<Vec<usize>> = brute_components(&coords, &keep, r)
            .into_iter()
            .filter(|g| g.len() >= min_points)
            .collect();
        want.sort();
        let mut got: Vec<Vec<usize>> = cluster_points(&coords, &sem, &[1], r, min_points)
            .into_iter()
            .map(|c| c.members)
            .collect();
        got.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn nms_keeps_no_overlapping_pair(
        sets in prop::collection::vec((prop::collection::btree_set(0usize..40, 1..20), 0.0..1.0f64), 1..15),
        thr in 0.1..0.9f64,
    ) {
        let proposals: Vec<Proposal> = sets
            .into_iter()
            .map(|(s, score)| Proposal { members: s.into_iter().collect(), space: Space::Original, class: 1, score })
            .collect();
        let kept = nms(&proposals, thr);
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                prop_assert!(point_iou(&proposals[i].members, &proposals[j].members) <= thr);
            }
        }
        for i in 0..proposals.len() {
            if !kept.contains(&i) {
                let blocker = kept.iter().any(|&k| {
                    proposals[k].score >= proposals[i].score
                        && point_iou(&proposals[i].members, &proposals[k].members) > thr
                });
                prop_assert!(blocker);
            }
        }
    }
}

#[test]
fn shifted_space_separates_touching_instances() {
    // two rows of points whose ends touch; offsets pull each toward its centre
    let mut coords = Vec::new();
    for k in 0..20 {
        coords.push([k as f64 * 0.005, 0.0, 0.0]);
    }
    for k in 0..20 {
        coords.push([0.1 + k as f64 * 0.005, 0.0, 0.0]);
    }
    let centres = [0.0475, 0.1475];
    let shifted: Vec<[f64; 3]> = coords
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = centres[i / 20];
            [c + (p[0] - c) * 0.1, 0.0, 0.0]
        })
        .collect();
    let sem = vec![1; 40];
    let cfg = InstanceConfig::default();
    let proposals = dual_set_cluster(&coords, &shifted, &sem, &cfg);
    let original: Vec<_> = proposals.iter().filter(|p| p.space == Space::Original).collect();
    let moved: Vec<_> = proposals.iter().filter(|p| p.space == Space::Shifted).collect();
    assert_eq!(original.len(), 1);
    assert_eq!(moved.len(), 2);
    assert_eq!(moved[0].members, (0..20).collect::<Vec<_>>());
    assert_eq!(moved[1].members, (20..40).collect::<Vec<_>>());
}

#[test]
fn text_exports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let coords = vec![[0.1, 0.2, 0.3], [1.0 / 3.0, 0.5, 0.25]];
    let shifted = vec![[0.15, 0.2, 0.3], [0.3, 0.45, 0.2]];
    let sem = vec![1, 0];
    let p = dir.path().join("shift.txt");
    export_shift_diagnostics(&p, &coords, &shifted, &sem).unwrap();
    assert_eq!(read_shift_diagnostics(&p).unwrap(), (coords.clone(), shifted, sem.clone()));
    let p = dir.path().join("inst.txt");
    write_instance_predictions(&p, &coords, &sem, &[0, -1], &[0.875, 0.0]).unwrap();
    let back = read_instance_predictions(&p).unwrap();
    assert_eq!(back, (coords, sem, vec![0, -1], vec![0.875, 0.0]));
}

fn tiny_patches(cfg: &ModelConfig) -> Vec<podseg_model::network::PreparedPatch> {
    let spec = PlantSpec {
        n_tillers: 1,
        ..PlantSpec::default().with_seed(8)
    };
    let (cloud, _) = generate_plant(&spec).unwrap();
    let (cloud, _) = normalize_unit_cube(&cloud).unwrap();
    let mut patches = training_patches(&cloud, &PatchSpec::default(), cfg).unwrap();
    patches.truncate(6);
    patches
}

#[test]
fn frozen_backbone_stays_bit_exact() {
    let cfg = ModelConfig {
        num_blocks: 2,
        ..ModelConfig::default()
    };
    let patches = tiny_patches(&cfg);
    let train = TrainConfig {
        epochs: 3,
        batch_size: 3,
        variant: Variant::FPstPg,
        ..TrainConfig::default()
    };
    let mut cfg = cfg;
    cfg.instance.prep_epoch = 1;
    let mut t = Trainer::new(cfg, train).unwrap();
    t.train_epoch(&patches).unwrap();
    let before = t.params.clone();
    t.train_epoch(&patches).unwrap();
    t.train_epoch(&patches).unwrap();
    let mut changed_head = false;
    for (name, tensor) in t.params.iter() {
        let old = before.get(name).unwrap();
        let same = tensor.data().iter().zip(old.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if name.starts_with("inst.offset") {
            changed_head |= !same;
        } else if !name.starts_with("inst.") {
            assert!(same, "{name} changed while frozen");
        }
    }
    assert!(changed_head);
}

#[test]
fn resume_continues_identically() {
    let cfg = ModelConfig {
        num_blocks: 2,
        ..ModelConfig::default()
    };
    let patches = tiny_patches(&cfg);
    let train = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut a = Trainer::new(cfg.clone(), train.clone()).unwrap();
    a.train_epoch(&patches).unwrap();
    a.save(&path).unwrap();
    a.train_epoch(&patches).unwrap();
    let mut b = Trainer::resume(cfg.clone(), train, &path).unwrap();
    assert_eq!(b.epoch, 1);
    b.train_epoch(&patches).unwrap();
    for (name, tensor) in a.params.iter() {
        assert_eq!(tensor.data(), b.params.get(name).unwrap().data(), "{name}");
    }
    let fresh = init_params::<f32>(&cfg, 0).unwrap();
    assert_eq!(fresh.names().collect::<Vec<_>>(), a.params.names().collect::<Vec<_>>());
}
