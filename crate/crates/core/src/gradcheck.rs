//! Finite-difference checks of the hand-written backward passes.
//!
//! Three suites: the bilinear warp on its own, each tape op in isolation,
//! and the whole generator -> composite -> discriminator -> loss chain on
//! 16x16 images. Central differences use [`FD_STEP`] in 64-bit arithmetic.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advnet::net::{discriminator_forward, generator_forward, Net, ToyNetSpec};
use crate::advnet::train::D_PARAM_BASE;
use crate::advnet::tape::{NodeId, Tape, TapePlacement};
use crate::advnet::tensor::Tensor;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::warp::{grad_check_on_canvas, kink_margin, rel_err, AugParams, RotationConvention};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Warp,
    Ops,
    EndToEnd,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Warp, Suite::Ops, Suite::EndToEnd];

    /// Largest accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Warp | Suite::Ops => 1e-4,
            Suite::EndToEnd => 1e-3,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Warp => "warp",
            Suite::Ops => "ops",
            Suite::EndToEnd => "end-to-end",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warp" => Ok(Suite::Warp),
            "ops" => Ok(Suite::Ops),
            "end-to-end" | "e2e" => Ok(Suite::EndToEnd),
            other => Err(Error::Config(format!("unknown gradcheck suite `{other}` (warp, ops, end-to-end)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub worst: f64,
    pub tolerance: f64,
    /// Compared derivatives.
    pub checks: usize,
    /// Coordinates left out because a kink lay within one step.
    pub skipped: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::default();
    match suite {
        Suite::Warp => warp_suite(&mut rng, &mut acc)?,
        Suite::Ops => ops_suite(&mut rng, &mut acc)?,
        Suite::EndToEnd => end_to_end_suite(&mut rng, &mut acc)?,
    }
    if acc.checks == 0 || acc.skipped * 10 > acc.checks {
        return Err(Error::Invariant(format!(
            "{suite} suite compared {} derivatives and skipped {}",
            acc.checks, acc.skipped
        )));
    }
    Ok(SuiteReport {
        suite,
        worst: acc.worst,
        tolerance: suite.tolerance(),
        checks: acc.checks,
        skipped: acc.skipped,
    })
}

#[derive(Default)]
struct Acc {
    worst: f64,
    checks: usize,
    skipped: usize,
}

impl Acc {
    fn add(&mut self, err: f64) {
        // NaN must not hide behind max()
        self.worst = if err.is_nan() { f64::INFINITY } else { self.worst.max(err) };
        self.checks += 1;
    }

    /// Compares `analytic` with the central difference of `f` at `x`,
    /// unless the one-sided differences disagree (a kink within the step).
    fn compare(&mut self, analytic: f64, x: f64, f: &mut dyn FnMut(f64) -> Result<f64>) -> Result<()> {
        let (hi, mid, lo) = (f(x + FD_STEP)?, f(x)?, f(x - FD_STEP)?);
        let (fwd, bwd) = ((hi - mid) / FD_STEP, (mid - lo) / FD_STEP);
        if rel_err(fwd, bwd) > 1e-2 {
            self.skipped += 1;
            return Ok(());
        }
        self.add(rel_err(analytic, (hi - lo) / (2.0 * FD_STEP)));
        Ok(())
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches length")
}

fn random_patch(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut r = Raster::zeros(w, h, 4);
    for v in &mut r.data {
        *v = rng.gen();
    }
    r
}

/// 100 random patch / parameter / upstream configurations, each away from
/// the sampling kinks by more than the finite-difference reach.
fn warp_suite(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let mut done = 0;
    while done < 100 {
        let patch = random_patch(rng.gen_range(3..10), rng.gen_range(3..10), rng);
        let canvas = (rng.gen_range(4..14), rng.gen_range(4..14));
        let p = AugParams::new(
            rng.gen_range(0.6..1.4),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        );
        if kink_margin((patch.width, patch.height), &p, canvas)? <= 1e-3 {
            continue;
        }
        let err = grad_check_on_canvas(&patch, &p, canvas, 1, FD_STEP, rng.gen())?;
        acc.add(err);
        done += 1;
    }
    Ok(())
}

/// Checks `<seed, op(inputs)>` against the tape's input gradients on up to
/// `picks` coordinates per input.
fn check_op(
    acc: &mut Acc,
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    picks: usize,
    op: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<()> {
    let forward = |xs: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids = xs.iter().map(|x| tape.input(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = op(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };
    let (mut tape, ids, out) = forward(inputs)?;
    let seed = uniform(&tape.value(out).shape, -1.0, 1.0, rng);
    tape.finalize();
    let grads = tape.backward(out, &seed)?;
    let dot = |t: &Tensor| t.data.iter().zip(&seed.data).map(|(a, b)| a * b).sum::<f64>();
    for (i, id) in ids.iter().enumerate() {
        let zero = inputs[i].zeros_like();
        let g = grads.node(*id).unwrap_or(&zero);
        for _ in 0..picks.min(inputs[i].len()) {
            let j = rng.gen_range(0..inputs[i].len());
            let mut f = |v: f64| -> Result<f64> {
                let mut xs = inputs.to_vec();
                xs[i].data[j] = v;
                let (t, _, o) = forward(&xs)?;
                Ok(dot(t.value(o)))
            };
            acc.compare(g.data[j], inputs[i].data[j], &mut f)?;
        }
    }
    Ok(())
}

/// Values at least `gap` apart in a random order, so pooling windows have a
/// clear winner.
fn spaced(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, v).expect("shape matches length")
}

fn ops_suite(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    for stride in [1, 2] {
        let xs = [
            uniform(&[2, 3, 7, 6], -1.0, 1.0, rng),
            uniform(&[4, 3, 3, 3], -1.0, 1.0, rng),
            uniform(&[4], -1.0, 1.0, rng),
        ];
        check_op(acc, rng, &xs, 12, &|t, v| t.conv2d(v[0], v[1], v[2], stride))?;
    }
    let mut x = uniform(&[2, 3, 4, 4], 0.05, 1.0, rng);
    for v in &mut x.data {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    check_op(acc, rng, &[x], 20, &|t, v| t.relu(v[0]))?;
    let x = spaced(&[2, 2, 6, 5], 0.01, rng);
    check_op(acc, rng, &[x], 20, &|t, v| t.maxpool2(v[0]))?;
    let x = uniform(&[2, 3, 4, 5], -1.0, 1.0, rng);
    check_op(acc, rng, &[x], 10, &|t, v| t.global_avg_pool(v[0]))?;
    let xs = [
        uniform(&[3, 5], -1.0, 1.0, rng),
        uniform(&[4, 5], -1.0, 1.0, rng),
        uniform(&[4], -1.0, 1.0, rng),
    ];
    check_op(acc, rng, &xs, 10, &|t, v| t.linear(v[0], v[1], v[2]))?;
    let x = uniform(&[3, 6], -2.0, 2.0, rng);
    check_op(acc, rng, &[x], 10, &|t, v| t.tanh(v[0]))?;
    let lo = [-0.5, -1.0, 0.2];
    let hi = [0.5, 2.0, 0.4];
    let x = uniform(&[2, 3], -0.9, 0.9, rng);
    check_op(acc, rng, &[x], 6, &|t, v| t.range_map(v[0], &lo, &hi))?;
    let gt = uniform(&[2, 3, 4, 4], 0.0, 1.0, rng);
    let mask: Vec<bool> = (0..6).map(|i| i != 4).collect();
    let x = uniform(&[2, 3, 4, 4], 0.0, 1.0, rng);
    check_op(acc, rng, &[x], 20, &|t, v| {
        t.mse(v[0], gt.clone(), mask.clone())
    })?;
    let x = uniform(&[2, 3], -1.0, 1.0, rng);
    check_op(acc, rng, &[x], 6, &|t, v| t.sum(v[0]))?;

    let placements = random_placements(2, 3, 2, rng);
    let xs = [uniform(&[2, 3, 12, 10], 0.0, 1.0, rng), uniform(&[2, 6], -0.4, 0.4, rng)];
    check_op(acc, rng, &xs, 20, &|t, v| {
        t.composite(v[0], v[1], placements.clone(), RotationConvention::Printed)
    })?;
    Ok(())
}

fn random_placements(n: usize, parts: usize, groups: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<TapePlacement>> {
    (0..n)
        .map(|_| {
            (0..parts)
                .map(|_| TapePlacement {
                    group: rng.gen_range(0..groups),
                    s: rng.gen_range(0.8..1.2),
                    patch: Arc::new(random_patch(rng.gen_range(4..9), rng.gen_range(4..9), rng)),
                })
                .collect()
        })
        .collect()
}

/// `L_D` of the discriminator on generator-placed parts, with the
/// generator's last layer randomly initialized so every layer gets signal.
fn end_to_end_suite(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let (n, groups, joints) = (2, 3, 4);
    let input = (3, 16, 16);
    let mut gspec = ToyNetSpec::toy_generator(input, groups, rng.gen());
    gspec.zero_last = false;
    let g = Net::init(gspec, 0)?;
    let d = Net::init(ToyNetSpec::toy_discriminator(input, joints, rng.gen()), D_PARAM_BASE)?;
    let images = uniform(&[n, 3, 16, 16], 0.0, 1.0, rng);
    let placements = random_placements(n, 3, groups, rng);
    let gt = uniform(&[n, joints, 4, 4], 0.0, 1.0, rng);
    let mask: Vec<bool> = (0..n * joints).map(|i| i != 1).collect();
    let (lo, hi) = ([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]);

    let loss = |g: &Net, d: &Net| -> Result<(Tape, NodeId)> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone())?;
        let gen = generator_forward(&mut tape, g, x, lo, hi)?;
        let comp = tape.composite(x, gen, placements.clone(), RotationConvention::Printed)?;
        let pred = discriminator_forward(&mut tape, d, comp)?;
        let l = tape.mse(pred, gt.clone(), mask.clone())?;
        Ok((tape, l))
    };
    let (mut tape, l) = loss(&g, &d)?;
    tape.finalize();
    let grads = tape.backward(l, &Tensor::scalar(1.0))?;

    for which in 0..2 {
        let net = if which == 0 { &g } else { &d };
        for i in 0..net.params.len() {
            let zero = net.params.values[i].zeros_like();
            let analytic = grads.param(net.params.id(i)).unwrap_or(&zero).clone();
            for _ in 0..4.min(analytic.len()) {
                let j = rng.gen_range(0..analytic.len());
                let mut f = |v: f64| -> Result<f64> {
                    let (mut g2, mut d2) = (g.clone(), d.clone());
                    let target = if which == 0 { &mut g2 } else { &mut d2 };
                    target.params.values[i].data[j] = v;
                    let (t, l) = loss(&g2, &d2)?;
                    Ok(t.value(l).item())
                };
                acc.compare(analytic.data[j], net.params.values[i].data[j], &mut f)?;
            }
        }
    }
    Ok(())
}
