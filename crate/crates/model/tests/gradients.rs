use std::sync::Arc;

use podseg_model::dvfe::{dvfe_forward, init_dvfe, VoxelGroups};
use podseg_model::instance::{
    init_instance_head, offset_branch, offset_losses, score_logits, score_loss, Proposal, Space,
};
use podseg_model::semantic::{dense_propagation, init_semantic_head, semantic_loss};
use podseg_model::window::{encoder_forward, init_encoder, WindowSet};
use podseg_model::ModelConfig;
use podseg_nn::{grad_check, is_buffer, Ctx, GradCheckReport, ModelParams, ParamInit, Segments, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn small() -> ModelConfig {
    let mut cfg = ModelConfig {
        c_mid: 4,
        c1: 8,
        c2: 6,
        heads: 2,
        window: [2, 2, 2],
        num_blocks: 2,
        mlp_hidden: 8,
        point_width: 4,
        ..ModelConfig::default()
    };
    cfg.instance.c3 = 4;
    cfg.instance.offset_hidden = 5;
    cfg.instance.score_hidden = 5;
    cfg
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn project(tape: &Tape<f64>, y: Var) -> podseg_nn::Result<Var> {
    let shape = tape.shape(y);
    let (r, c) = (shape[0], shape[1..].iter().product::<usize>());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(random(&mut rng, &[c, 1]));
    let z = tape.matmul(y, w)?;
    let ones = tape.constant(Tensor::filled(&[1, r], 1.0));
    tape.matmul(ones, z)
}

/// Checks `f` with respect to `data` inputs and every trainable parameter.
fn check(
    params: &ModelParams<f64>,
    data: Vec<Tensor<f64>>,
    f: impl Fn(&Ctx<f64>, &[Var]) -> podseg_model::Result<Var>,
) -> GradCheckReport {
    let names: Vec<String> = params.names().filter(|n| !is_buffer(n)).map(str::to_string).collect();
    let k = data.len();
    let mut inputs = data;
    inputs.extend(names.iter().map(|n| params.get(n).unwrap().clone()));
    let report = grad_check(
        |tape, vars| {
            let ctx = Ctx::new(tape, params, true);
            for (n, v) in names.iter().zip(&vars[k..]) {
                ctx.bind(n, *v);
            }
            let y = f(&ctx, &vars[..k]).map_err(|e| podseg_nn::NnError::Config(e.to_string()))?;
            if tape.shape(y).iter().product::<usize>() == 1 {
                Ok(y)
            } else {
                project(tape, y)
            }
        },
        &inputs,
        TOL,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > 0);
    report
}

fn groups(lists: &[Vec<usize>], n_points: usize) -> VoxelGroups {
    let mut p2v = vec![0; n_points];
    for (v, l) in lists.iter().enumerate() {
        l.iter().for_each(|&p| p2v[p] = v);
    }
    VoxelGroups {
        voxels: Arc::new(Segments::from_lists(lists)),
        point_to_voxel: Arc::new(p2v),
    }
}

#[test]
fn dvfe_end_to_end() {
    let cfg = small();
    let mut params = ModelParams::new(1);
    init_dvfe(&mut ParamInit::new(&mut params), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[10, cfg.in_channels()]);
    let g = groups(&[vec![0, 3, 4, 9], vec![1, 2], vec![5, 6, 7, 8]], 10);
    check(&params, vec![x], |ctx, v| dvfe_forward(ctx, &cfg, v[0], &g));
}

#[test]
fn encoder_two_blocks_end_to_end() {
    let cfg = small();
    let mut params = ModelParams::new(2);
    init_encoder(&mut ParamInit::new(&mut params), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[8, cfg.c1]);
    let sets = [
        WindowSet {
            groups: Arc::new(Segments::from_lists(&[vec![0, 1, 2], vec![3, 4], vec![5, 6, 7]])),
            pe: random(&mut rng, &[8, cfg.c2]),
        },
        WindowSet {
            groups: Arc::new(Segments::from_lists(&[vec![0, 3], vec![1, 2, 4, 5], vec![6, 7]])),
            pe: random(&mut rng, &[8, cfg.c2]),
        },
    ];
    check(&params, vec![x], |ctx, v| encoder_forward(ctx, &cfg, v[0], &sets));
}

#[test]
fn dense_propagation_and_semantic_loss() {
    let cfg = small();
    let mut params = ModelParams::new(3);
    init_semantic_head(&mut ParamInit::new(&mut params), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gv = random(&mut rng, &[3, cfg.c2]);
    let f = random(&mut rng, &[7, cfg.in_channels()]);
    let g = groups(&[vec![0, 1], vec![2, 3, 4], vec![5, 6]], 7);
    check(&params, vec![gv.clone(), f.clone()], |ctx, v| {
        dense_propagation(ctx, v[0], &g, v[1])
    });
    let labels = [0, 1, 1, 0, 1, 0, 0];
    check(&params, vec![gv, f], |ctx, v| {
        let dense = dense_propagation(ctx, v[0], &g, v[1])?;
        let logits = podseg_model::semantic::class_logits(ctx, dense)?;
        let probs = ctx.tape.softmax_rows(logits)?;
        semantic_loss(ctx.tape, probs, &labels)
    });
}

#[test]
fn offset_branch_and_losses() {
    let cfg = small();
    let mut params = ModelParams::new(4);
    init_instance_head(&mut ParamInit::new(&mut params), &cfg).unwrap();
    let offset_only = {
        let mut p = ModelParams::new(4);
        for (n, t) in params.iter().filter(|(n, _)| n.starts_with("inst.offset")) {
            p.insert(n, t.clone()).unwrap();
        }
        p
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = random(&mut rng, &[9, cfg.point_feature_width()]);
    check(&offset_only, vec![g.clone()], |ctx, v| offset_branch(ctx, v[0]));
    let target: Vec<f64> = (0..27).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mask = vec![true, false, true, true, true, false, true, true, true];
    check(&offset_only, vec![g], |ctx, v| {
        let os = offset_branch(ctx, v[0])?;
        let (reg, dir) = offset_losses(ctx.tape, os, &target, &mask)?;
        Ok(ctx.tape.add(reg, dir)?)
    });
}

#[test]
fn score_net_and_loss() {
    let cfg = small();
    let mut params = ModelParams::new(5);
    init_instance_head(&mut ParamInit::new(&mut params), &cfg).unwrap();
    let score_only = {
        let mut p = ModelParams::new(5);
        for (n, t) in params.iter().filter(|(n, _)| n.starts_with("inst.score")) {
            p.insert(n, t.clone()).unwrap();
        }
        p
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random(&mut rng, &[12, cfg.point_feature_width()]);
    let coords: Vec<[f64; 3]> = (0..12)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let prop = |members: Vec<usize>| Proposal {
        members,
        space: Space::Original,
        class: 1,
        score: 0.0,
    };
    let proposals = vec![prop(vec![0, 1, 2, 3]), prop(vec![4, 5, 6]), prop(vec![2, 3, 7, 8, 9, 10, 11])];
    check(&score_only, vec![g.clone()], |ctx, v| score_logits(ctx, v[0], &coords, &proposals));
    check(&score_only, vec![g], |ctx, v| {
        let logits = score_logits(ctx, v[0], &coords, &proposals)?;
        score_loss(ctx.tape, logits, &[1.0, 0.3, 0.0])
    });
}
