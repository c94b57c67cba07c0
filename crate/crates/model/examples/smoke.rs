use std::time::Instant;
use podseg_model::network::{assemble_batch, forward, PreparedPatch};
use podseg_model::semantic::argmax_rows;
use podseg_model::window::Phase;
use podseg_nn::{Ctx, Tape};
use rand::SeedableRng;

fn batch_stat_acc(t: &Trainer, patches: &[PreparedPatch]) -> f64 {
    let (mut ok, mut n) = (0usize, 0usize);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for p in patches {
        let tape = Tape::<f32>::new();
        let ctx = Ctx::new(&tape, &t.params, true);
        let data = assemble_batch::<f32, _>(&[p], &t.model, Phase::Inference, &mut rng).unwrap();
        let fw = forward(&ctx, &t.model, &data, false).unwrap();
        let v: Vec<f64> = tape.value(fw.logits).data().iter().map(|&x| x as f64).collect();
        let pred = argmax_rows(&v, 2);
        for (a, b) in pred.iter().zip(p.sem.as_ref().unwrap()) { ok += (a == b) as usize; n += 1; }
    }
    ok as f64 / n as f64
}
use podseg_core::dataset::{generate_plant, normalize_unit_cube, PlantSpec};
use podseg_model::network::{prepare_patch, training_patches};
use podseg_model::semantic::{crop_patches, merge_small_patches};
use podseg_model::train::Trainer;
use podseg_model::{ModelConfig, PatchSpec, TrainConfig, Variant};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant: Variant = args.get(1).map_or("pst", |s| s).parse().unwrap();
    let epochs: usize = args.get(2).map_or(20, |v| v.parse().unwrap());
    let cycle: u64 = args.get(3).map_or(0, |v| v.parse().unwrap());
    let cfg = ModelConfig::default();
    let spec = PatchSpec::default();
    let mut train = Vec::new();
    let mut held = Vec::new();
    for seed in [1, 2] {
        let (cloud, _) = generate_plant(&PlantSpec::default().with_seed(seed)).unwrap();
        let (cloud, _) = normalize_unit_cube(&cloud).unwrap();
        for p in merge_small_patches(crop_patches(&cloud.coords, spec.patch_len, 0.04), spec.min_patch_points) {
            held.push(prepare_patch(&cloud, &p, &cfg).unwrap());
        }
        train.extend(training_patches(&cloud, &spec, &cfg).unwrap());
    }
    println!("train patches {} held {}", train.len(), held.len());
    let t0 = Instant::now();
    let tc = TrainConfig { epochs, variant, eval_every: 20, cycle_len: cycle, augment: args.get(4).is_some_and(|a| a == "aug"), ..TrainConfig::default() };
    let mut tr = Trainer::new(cfg, tc).unwrap();
    let train2 = train.clone();
    let train = &train2;
    tr.fit(train, &[], |r, t| {
        if r.val_loss.is_some() {
            let h = t.evaluate(&held).unwrap();
            println!("   batchstat train {:.4} held {:.4}", batch_stat_acc(t, &train), batch_stat_acc(t, &held));
            println!("{:.0?} e{} loss {:.4} train oacc {:.4?} held oacc {:.4} loss {:.4}", t0.elapsed(), r.epoch, r.losses.total, r.val_oacc, h.oacc, h.loss);
        }
        Ok(())
    }).unwrap();
}
