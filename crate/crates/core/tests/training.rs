mod common;

use image::{Rgba, RgbaImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semaug::advnet::train::{
    adversarial_train_step, evaluate_pck, init_state, train_loop, Mode, StepOptions, TrainConfig, TrainSample,
    TrainState, D_PARAM_BASE,
};
use semaug::advnet::{Net, OptimState};
use semaug::partpool::{BuildConfig, ClassCatalog, PartPatch, PartPool};
use semaug::pose::JointSchema;

fn samples(n: usize, sigma: f64) -> Vec<TrainSample> {
    common::people(0, common::TRAIN, n)
        .into_iter()
        .map(|p| TrainSample::new(p, 4, sigma).unwrap())
        .collect()
}

fn asda_cfg() -> TrainConfig {
    TrainConfig {
        mode: Mode::Asda,
        batch_size: 2,
        val_every: 0,
        ..TrainConfig::default()
    }
}

fn state(cfg: &TrainConfig) -> TrainState {
    init_state(cfg, (3, 64, 64), 8).unwrap()
}

fn opts(cfg: &TrainConfig) -> StepOptions {
    StepOptions {
        sda: cfg.sda,
        groups: cfg.groups,
        clip: cfg.clip,
    }
}

fn step(st: &mut TrainState, batch: &[&TrainSample], pool: &PartPool, cfg: &TrainConfig, seed: u64) -> f64 {
    let (g, gs) = st.g.as_mut().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    adversarial_train_step(batch, pool, g, &mut st.d, gs, &mut st.d_state, &opts(cfg), &mut rng)
        .unwrap()
        .l_d
}

/// A state after a few ordinary steps. Fresh discriminators have a zero
/// output layer, so nothing flows back to the generator before the first
/// update.
fn warmed(cfg: &TrainConfig, batch: &[&TrainSample], pool: &PartPool) -> TrainState {
    let mut st = state(cfg);
    for i in 0..3 {
        step(&mut st, batch, pool, cfg, 100 + i);
    }
    st
}

fn g_net(st: &TrainState) -> &Net {
    &st.g.as_ref().unwrap().0
}

#[test]
fn generator_and_discriminator_ids_are_disjoint() {
    let st = state(&asda_cfg());
    let g = g_net(&st);
    assert!((0..g.params.len()).all(|i| g.params.id(i).0 < D_PARAM_BASE));
    assert!((0..st.d.params.len()).all(|i| st.d.params.id(i).0 >= D_PARAM_BASE));
}

#[test]
fn each_update_touches_only_its_own_network() {
    let cfg = asda_cfg();
    let pool = common::toy_pool(0, 3);
    let data = samples(2, 1.0);
    let batch: Vec<&TrainSample> = data.iter().collect();

    let warm = warmed(&cfg, &batch, &pool);
    let (g0, d0) = (g_net(&warm).clone(), warm.d.clone());

    let mut st = warm.clone();
    st.d_state.lr = 0.0;
    step(&mut st, &batch, &pool, &cfg, 1);
    assert_eq!(st.d.params, d0.params);
    assert_ne!(g_net(&st).params, g0.params);

    let mut st = warm;
    st.g.as_mut().unwrap().1.lr = 0.0;
    step(&mut st, &batch, &pool, &cfg, 1);
    assert_eq!(g_net(&st).params, g0.params);
    assert_ne!(st.d.params, d0.params);
}

#[test]
fn generator_ascends_a_frozen_discriminator_loss() {
    let cfg = asda_cfg();
    let pool = common::toy_pool(0, 3);
    let data = samples(2, 1.0);
    let batch: Vec<&TrainSample> = data.iter().collect();
    let mut st = warmed(&cfg, &batch, &pool);
    st.d_state.lr = 0.0;
    st.g.as_mut().unwrap().1.lr = 1e-2;
    // same parts and scales every step, so only the placements change
    let losses: Vec<f64> = (0..25).map(|_| step(&mut st, &batch, &pool, &cfg, 3)).collect();
    assert!(
        losses[24] > losses[0],
        "L_D did not rise under generator updates: {:?}",
        losses
    );
}

#[test]
fn transparent_parts_give_the_generator_no_gradient() {
    let cfg = asda_cfg();
    let catalog = ClassCatalog::lip_default();
    let mut pool = PartPool::empty(catalog, BuildConfig::default());
    for class in [5u8, 14, 24] {
        pool.entries[class as usize].push(PartPatch {
            class_id: class,
            pixels: RgbaImage::from_pixel(40, 60, Rgba([200, 30, 30, 0])),
            source_id: "clear".into(),
            source_person_height: 200.0,
        });
    }
    let data = samples(2, 1.0);
    let batch: Vec<&TrainSample> = data.iter().collect();
    let mut st = warmed(&cfg, &batch, &common::toy_pool(0, 3));
    // fresh moments, so any generator movement needs a non-zero gradient
    let (g, gs) = st.g.as_mut().unwrap();
    *gs = OptimState::new(&g.params, gs.lr);
    let g0 = g_net(&st).clone();
    let d0 = st.d.clone();
    step(&mut st, &batch, &pool, &cfg, 4);
    assert_eq!(g_net(&st).params, g0.params);
    assert_ne!(st.d.params, d0.params);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let pool = common::toy_pool(0, 3);
    let data = samples(4, 1.0);
    let val = common::people(0, common::TEST, 4);
    let schema = JointSchema::toy();
    for mode in [Mode::Baseline, Mode::Sda, Mode::Asda] {
        let cfg = TrainConfig {
            mode,
            epochs: 3,
            milestones: vec![1, 2],
            val_every: 1,
            ..asda_cfg()
        };
        let full = train_loop(&cfg, &data, &val, Some(&pool), &schema, None, None).unwrap();
        let head = train_loop(&TrainConfig { epochs: 1, ..cfg.clone() }, &data, &val, Some(&pool), &schema, None, None).unwrap();
        let rest = train_loop(&cfg, &data, &val, Some(&pool), &schema, None, Some(head)).unwrap();
        assert_eq!(full, rest, "{mode:?}");
        let again = train_loop(&cfg, &data, &val, Some(&pool), &schema, None, None).unwrap();
        assert_eq!(full, again, "{mode:?} is not deterministic");
    }
}

#[test]
fn baseline_overfits_four_images() {
    let data = samples(4, 1.0);
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 4,
        lr: 3e-3,
        sigma: 1.0,
        milestones: vec![],
        val_every: 0,
        ..TrainConfig::default()
    };
    let schema = JointSchema::toy();
    let st = train_loop(&cfg, &data, &[], None, &schema, None, None).unwrap();
    let first = st.epochs.first().unwrap().l_d;
    let last = st.epochs.last().unwrap().l_d;
    assert!(last < 0.2 * first, "loss {first} -> {last}");
    let people: Vec<_> = data.iter().map(|s| s.person.clone()).collect();
    let train_pck = evaluate_pck(&st.d, &people, 4, 0.2, &schema).unwrap();
    assert!(train_pck >= 90.0, "train PCK {train_pck}");
}

#[test]
fn sda_and_asda_need_a_pool() {
    let data = samples(2, 1.0);
    let schema = JointSchema::toy();
    for mode in [Mode::Sda, Mode::Asda] {
        let cfg = TrainConfig { mode, epochs: 1, ..asda_cfg() };
        let empty = PartPool::empty(ClassCatalog::lip_default(), BuildConfig::default());
        assert!(train_loop(&cfg, &data, &[], None, &schema, None, None).is_err());
        assert!(train_loop(&cfg, &data, &[], Some(&empty), &schema, None, None).is_err());
    }
}
