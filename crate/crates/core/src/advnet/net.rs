use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{conv_out, NodeId, ParamId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    /// 3x3 convolution, zero padding 1.
    Conv { out: usize, stride: usize },
    Relu,
    MaxPool,
    GlobalAvgPool,
    Linear { out: usize },
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyNetSpec {
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
    pub init_seed: u64,
    /// Initialize the last parameterized layer to zero.
    #[serde(default)]
    pub zero_last: bool,
}

/// Activation shape after a layer: `[c, h, w]` maps or `[f]` features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl ToyNetSpec {
    /// Generator layout: two conv-relu-pool stages, pooled features and a
    /// linear head with `3 * groups` outputs.
    pub fn toy_generator(input: (usize, usize, usize), groups: usize, init_seed: u64) -> Self {
        ToyNetSpec {
            input,
            layers: vec![
                Layer::Conv { out: 8, stride: 2 },
                Layer::Relu,
                Layer::MaxPool,
                Layer::Conv { out: 16, stride: 1 },
                Layer::Relu,
                Layer::MaxPool,
                Layer::GlobalAvgPool,
                Layer::Linear { out: 3 * groups },
            ],
            init_seed,
            zero_last: true,
        }
    }

    /// Discriminator layout: three conv-relu stages (two of stride 2) and a
    /// conv head with one channel per joint, at stride 4.
    pub fn toy_discriminator(input: (usize, usize, usize), joints: usize, init_seed: u64) -> Self {
        ToyNetSpec {
            input,
            layers: vec![
                Layer::Conv { out: 8, stride: 2 },
                Layer::Relu,
                Layer::Conv { out: 16, stride: 2 },
                Layer::Relu,
                Layer::Conv { out: 16, stride: 1 },
                Layer::Relu,
                Layer::Conv { out: joints, stride: 1 },
            ],
            init_seed,
            zero_last: true,
        }
    }

    /// Checks layer compatibility and returns the output shape.
    pub fn output_shape(&self) -> Result<Shape> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty network input {:?}", self.input)));
        }
        let mut s = Shape::Map(c, h, w);
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |why: &str| Error::Config(format!("layer {i} ({l:?}): {why}"));
            s = match (*l, s) {
                (Layer::Conv { out, stride }, Shape::Map(_, h, w)) => {
                    if out == 0 || stride == 0 {
                        return Err(bad("needs positive channels and stride"));
                    }
                    Shape::Map(out, conv_out(h, stride), conv_out(w, stride))
                }
                (Layer::MaxPool, Shape::Map(c, h, w)) => {
                    if h < 2 || w < 2 {
                        return Err(bad("map smaller than the pooling window"));
                    }
                    Shape::Map(c, h / 2, w / 2)
                }
                (Layer::GlobalAvgPool, Shape::Map(c, _, _)) => Shape::Flat(c),
                (Layer::Linear { out }, Shape::Flat(_)) => {
                    if out == 0 {
                        return Err(bad("needs positive width"));
                    }
                    Shape::Flat(out)
                }
                (Layer::Relu | Layer::Tanh, s) => s,
                (_, Shape::Flat(_)) => return Err(bad("needs a spatial input")),
                (_, Shape::Map(..)) => return Err(bad("needs a flat input")),
            };
        }
        Ok(s)
    }

    /// `(name, weight shape, bias shape)` per parameterized layer.
    fn param_shapes(&self) -> Result<Vec<(usize, Vec<usize>, usize)>> {
        self.output_shape()?;
        let (c, h, w) = self.input;
        let mut s = Shape::Map(c, h, w);
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            s = match (*l, s) {
                (Layer::Conv { out: co, stride }, Shape::Map(ci, h, w)) => {
                    out.push((i, vec![co, ci, 3, 3], co));
                    Shape::Map(co, conv_out(h, stride), conv_out(w, stride))
                }
                (Layer::MaxPool, Shape::Map(c, h, w)) => Shape::Map(c, h / 2, w / 2),
                (Layer::GlobalAvgPool, Shape::Map(c, _, _)) => Shape::Flat(c),
                (Layer::Linear { out: fo }, Shape::Flat(fi)) => {
                    out.push((i, vec![fo, fi], fo));
                    Shape::Flat(fo)
                }
                (_, s) => s,
            };
        }
        Ok(out)
    }
}

/// Named parameter tensors. Ids are `base + index`, so two stores with
/// different bases can share one tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub base: usize,
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl ParamStore {
    pub fn id(&self, i: usize) -> ParamId {
        ParamId(self.base + i)
    }

    pub fn index(&self, id: ParamId) -> Option<usize> {
        id.0.checked_sub(self.base).filter(|&i| i < self.values.len())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// sha256 over shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.values {
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub spec: ToyNetSpec,
    pub params: ParamStore,
}

impl Net {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(spec: ToyNetSpec, base: usize) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let last = shapes.len().saturating_sub(1);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (k, (layer, wshape, bias)) in shapes.into_iter().enumerate() {
            let fan_in: usize = wshape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut w = Tensor::zeros(&wshape);
            if !(spec.zero_last && k == last) {
                for v in &mut w.data {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            names.push(format!("layer{layer}.weight"));
            values.push(w);
            names.push(format!("layer{layer}.bias"));
            values.push(Tensor::zeros(&[bias]));
        }
        Ok(Net {
            spec,
            params: ParamStore { base, names, values },
        })
    }

    /// Records the layer stack on `tape` for a batch `x: [n, c, h, w]`.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if (c, h, w) != self.spec.input {
            return Err(Error::Domain(format!(
                "network expects {:?} inputs, got {:?}",
                self.spec.input,
                (c, h, w)
            )));
        }
        let mut cur = x;
        let mut p = 0;
        let leaf = |tape: &mut Tape, p: &mut usize| -> Result<(NodeId, NodeId)> {
            let wn = tape.param(self.params.id(*p), self.params.values[*p].clone())?;
            let bn = tape.param(self.params.id(*p + 1), self.params.values[*p + 1].clone())?;
            *p += 2;
            Ok((wn, bn))
        };
        for l in &self.spec.layers {
            cur = match *l {
                Layer::Conv { stride, .. } => {
                    let (wn, bn) = leaf(tape, &mut p)?;
                    tape.conv2d(cur, wn, bn, stride)?
                }
                Layer::Linear { .. } => {
                    let (wn, bn) = leaf(tape, &mut p)?;
                    tape.linear(cur, wn, bn)?
                }
                Layer::Relu => tape.relu(cur)?,
                Layer::MaxPool => tape.maxpool2(cur)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(cur)?,
                Layer::Tanh => tape.tanh(cur)?,
            };
        }
        Ok(cur)
    }
}

/// Generator head: network output squashed by tanh and mapped into the
/// per-group `(r, tx, ty)` bounds. Returns an `[n, 3G]` node.
pub fn generator_forward(
    tape: &mut Tape,
    g: &Net,
    image: NodeId,
    lo: [f64; 3],
    hi: [f64; 3],
) -> Result<NodeId> {
    let raw = g.forward(tape, image)?;
    let f = *tape.value(raw).shape.last().unwrap_or(&0);
    if tape.value(raw).shape.len() != 2 || f % 3 != 0 {
        return Err(Error::Domain(format!(
            "generator must output [n, 3G] features, got {:?}",
            tape.value(raw).shape
        )));
    }
    let squashed = tape.tanh(raw)?;
    let lo: Vec<f64> = lo.iter().copied().cycle().take(f).collect();
    let hi: Vec<f64> = hi.iter().copied().cycle().take(f).collect();
    tape.range_map(squashed, &lo, &hi)
}

/// Discriminator: `[n, K, h / stride, w / stride]` heatmaps.
pub fn discriminator_forward(tape: &mut Tape, d: &Net, image: NodeId) -> Result<NodeId> {
    let out = d.forward(tape, image)?;
    tape.value(out).dims4()?;
    Ok(out)
}
