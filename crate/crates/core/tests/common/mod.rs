//! Central finite-difference checks in f64, shared by the gradient tests and
//! the acceptance suite.
#![allow(dead_code)]

pub mod oracles;

use dino_rbc::params::ParamSet;
use dino_rbc::rng::{stream, Rng};
use dino_rbc::ssl::{self, CenteringMode, DinoHead, SslConfig};
use dino_rbc::tensor::{Tape, Tensor, Var};
use dino_rbc::vit::{self, VitConfig, VitEncoder};
use dino_rbc::Result;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
/// Floor on the denominator of the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar probe `sum(out ⊙ r)` with a fixed random `r`, so every output entry
/// contributes a distinct weight.
fn probe(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    if tape.shape(out).iter().product::<usize>() == 1 {
        return Ok(tape.sum(out));
    }
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn eval(case: &Case, inputs: &[Tensor<f64>], weights: &Option<Tensor<f64>>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let loss = match weights {
        Some(w) => probe(&mut tape, out, w).unwrap(),
        None => tape.sum(out),
    };
    tape.value(loss).item()
}

/// Max relative error between the tape gradient and central differences over
/// every input entry of one case.
pub fn check_case(case: &Case, rng: &mut Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let weights = (shape.iter().product::<usize>() > 1).then(|| uniform(rng, &shape, 0.5, 1.5));
    let loss = match &weights {
        Some(w) => probe(&mut tape, out, w).unwrap(),
        None => tape.sum(out),
    };
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let mut worst = 0.0f64;
    for (i, t) in case.inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let num = (eval(case, &plus, &weights) - eval(case, &minus, &weights)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[i].data()[j], num));
        }
    }
    worst
}

fn case(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        build: Box::new(build),
    }
}

/// Random instance of each differentiable primitive.
pub fn primitive_case(name: &str, rng: &mut Rng) -> Case {
    let d = |rng: &mut Rng| rng.random_range(2..5usize);
    let (m, k, n) = (d(rng), d(rng), d(rng));
    match name {
        "matmul" => case(
            vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        "matmul_batched" => case(
            vec![uniform(rng, &[2, m, k], -1.0, 1.0), uniform(rng, &[2, k, n], -1.0, 1.0)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        "matmul_shared_rhs" => case(
            vec![uniform(rng, &[2, m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        "add_broadcast" => case(
            vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[n], -1.0, 1.0)],
            |t, v| t.add(v[0], v[1]),
        ),
        "sub" => case(
            vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[m, n], -1.0, 1.0)],
            |t, v| t.sub(v[0], v[1]),
        ),
        "mul_broadcast" => case(
            vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[n], -1.0, 1.0)],
            |t, v| t.mul(v[0], v[1]),
        ),
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            case(vec![uniform(rng, &[m, n], -1.0, 1.0)], move |t, v| Ok(t.scale(v[0], s)))
        }
        "add_scalar" => {
            let s = rng.random_range(-2.0..2.0);
            case(vec![uniform(rng, &[m, n], -1.0, 1.0)], move |t, v| {
                Ok(t.add_scalar(v[0], s))
            })
        }
        "permute" => case(vec![uniform(rng, &[m, k, n], -1.0, 1.0)], |t, v| {
            t.permute(v[0], &[2, 0, 1])
        }),
        "transpose" => case(vec![uniform(rng, &[2, m, n], -1.0, 1.0)], |t, v| t.transpose(v[0])),
        "reshape" => case(vec![uniform(rng, &[m, n], -1.0, 1.0)], move |t, v| {
            t.reshape(v[0], &[m * n])
        }),
        "expand" => case(vec![uniform(rng, &[m, n], -1.0, 1.0)], |t, v| t.expand(v[0], &[3])),
        "concat" => case(
            vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[m, n], -1.0, 1.0)],
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        "narrow" => case(vec![uniform(rng, &[m, k + 2], -1.0, 1.0)], move |t, v| {
            t.narrow(v[0], 1, 1, k)
        }),
        "gather_rows" => {
            let rows: Vec<usize> = (0..5).map(|_| rng.random_range(0..m)).collect();
            case(vec![uniform(rng, &[m, n], -1.0, 1.0)], move |t, v| {
                t.gather_rows(v[0], &rows)
            })
        }
        "softmax" => {
            let tau = rng.random_range(0.1..2.0);
            case(vec![uniform(rng, &[m, n], -2.0, 2.0)], move |t, v| {
                t.softmax(v[0], 1, tau)
            })
        }
        "softmax_axis0" => case(vec![uniform(rng, &[m, n], -2.0, 2.0)], |t, v| t.softmax(v[0], 0, 1.0)),
        "log_softmax" => {
            let tau = rng.random_range(0.1..2.0);
            case(vec![uniform(rng, &[m, n], -2.0, 2.0)], move |t, v| {
                t.log_softmax(v[0], 1, tau)
            })
        }
        "layernorm" => case(
            vec![
                uniform(rng, &[m, n + 1], -2.0, 2.0),
                uniform(rng, &[n + 1], 0.5, 1.5),
                uniform(rng, &[n + 1], -0.5, 0.5),
            ],
            |t, v| t.layernorm(v[0], v[1], v[2], 1e-6),
        ),
        "gelu" => case(vec![uniform(rng, &[m, n], -3.0, 3.0)], |t, v| Ok(t.gelu(v[0]))),
        "l2_normalize" => case(vec![uniform(rng, &[m, n], -2.0, 2.0)], |t, v| {
            t.l2_normalize(v[0], 1, 1e-12)
        }),
        "exp" => case(vec![uniform(rng, &[m, n], -2.0, 2.0)], |t, v| Ok(t.exp(v[0]))),
        "log" => case(vec![uniform(rng, &[m, n], 0.5, 3.0)], |t, v| Ok(t.log(v[0]))),
        "sqrt" => case(vec![uniform(rng, &[m, n], 0.5, 3.0)], |t, v| Ok(t.sqrt(v[0]))),
        "sum" => case(vec![uniform(rng, &[m, n], -1.0, 1.0)], |t, v| Ok(t.sum(v[0]))),
        "mean" => case(vec![uniform(rng, &[m, n], -1.0, 1.0)], |t, v| Ok(t.mean(v[0]))),
        "sum_axis" => case(vec![uniform(rng, &[m, k, n], -1.0, 1.0)], |t, v| t.sum_axis(v[0], 1)),
        "mean_axis" => case(vec![uniform(rng, &[m, k, n], -1.0, 1.0)], |t, v| t.mean_axis(v[0], 2)),
        "attention" => {
            let (dim, heads) = (4, 2);
            case(
                vec![
                    uniform(rng, &[1, 3, dim], -1.0, 1.0),
                    uniform(rng, &[dim, 3 * dim], -0.7, 0.7),
                    uniform(rng, &[3 * dim], -0.2, 0.2),
                    uniform(rng, &[dim, dim], -0.7, 0.7),
                    uniform(rng, &[dim], -0.2, 0.2),
                ],
                move |t, v| Ok(vit::multi_head_attention(t, v[0], v[1], v[2], v[3], v[4], heads)?.out),
            )
        }
        "koleo" => case(vec![uniform(rng, &[m + 2, n], -1.0, 1.0)], |t, v| {
            ssl::koleo(t, v[0], 1e-8)
        }),
        "dino_loss" => {
            let probs: Vec<Tensor<f64>> = (0..2)
                .map(|_| {
                    let raw = uniform(rng, &[m, n], 0.1, 1.0);
                    let mut data = raw.data().to_vec();
                    for row in data.chunks_mut(n) {
                        let s: f64 = row.iter().sum();
                        row.iter_mut().for_each(|x| *x /= s);
                    }
                    Tensor::new(vec![m, n], data).unwrap()
                })
                .collect();
            let temp = rng.random_range(0.1..1.0);
            case(
                vec![
                    uniform(rng, &[m, n], -1.0, 1.0),
                    uniform(rng, &[m, n], -1.0, 1.0),
                    uniform(rng, &[m, n], -1.0, 1.0),
                ],
                move |t, v| ssl::dino_loss(t, v, &probs, temp),
            )
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "matmul_batched",
    "matmul_shared_rhs",
    "add_broadcast",
    "sub",
    "mul_broadcast",
    "scale",
    "add_scalar",
    "permute",
    "transpose",
    "reshape",
    "expand",
    "concat",
    "narrow",
    "gather_rows",
    "softmax",
    "softmax_axis0",
    "log_softmax",
    "layernorm",
    "gelu",
    "l2_normalize",
    "exp",
    "log",
    "sqrt",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "attention",
    "koleo",
    "dino_loss",
];

/// Worst relative error over `cases` random instances of `name`.
pub fn primitive_max_err(name: &str, cases: usize) -> f64 {
    let mut rng = stream(0x6AD, &[name.len() as u64, name.bytes().map(u64::from).sum()]);
    (0..cases)
        .map(|_| {
            let c = primitive_case(name, &mut rng);
            check_case(&c, &mut rng)
        })
        .fold(0.0, f64::max)
}

/// Tiny encoder plus head and the full student objective, as a function of
/// the concatenated parameter vector; teacher targets are fixed constants.
pub struct Composite {
    pub encoder: VitEncoder<f64>,
    pub head: DinoHead<f64>,
    pub views: Vec<Tensor<f64>>,
    pub targets: Vec<Tensor<f64>>,
    pub cfg: SslConfig,
}

impl Composite {
    pub fn new(seed: u64, koleo: bool) -> Self {
        let mut rng = stream(seed, &[0xC0]);
        let vcfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            in_channels: 3,
        };
        let cfg = SslConfig {
            prototypes: 6,
            head_hidden_dim: 8,
            head_bottleneck_dim: 4,
            centering: CenteringMode::Sinkhorn,
            koleo_enabled: koleo,
            koleo_weight: 0.1,
            ..SslConfig::default()
        };
        let mut encoder = VitEncoder::<f64>::init(vcfg, &mut rng).unwrap();
        // larger weights than the init scale so every path carries signal
        for t in encoder.params.tensors_mut() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let mut head = DinoHead::<f64>::init(8, &cfg, &mut rng);
        for t in head.params.tensors_mut() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let views: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&mut rng, &[3, 8, 8, 3], 0.0, 1.0)).collect();
        let logits: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&mut rng, &[3, 6], -0.1, 0.1)).collect();
        let state = ssl::CenteringState::new(cfg.centering, cfg.prototypes);
        let targets = ssl::center_teacher(&logits, &state, &cfg).unwrap().probs;
        Self {
            encoder,
            head,
            views,
            targets,
            cfg,
        }
    }

    /// Total loss and, if `grad`, the gradient of every parameter (encoder
    /// parameters first, then head parameters, in layout order).
    pub fn loss(&self, enc: &ParamSet<f64>, head: &ParamSet<f64>, grad: bool) -> (f64, Vec<Tensor<f64>>) {
        let encoder = VitEncoder {
            config: self.encoder.config.clone(),
            params: enc.clone(),
        };
        let h = DinoHead { params: head.clone() };
        let mut tape = Tape::new();
        let eb = encoder.params.bind(&mut tape, true);
        let hb = h.params.bind(&mut tape, true);
        let terms = ssl::total_loss(&mut tape, &encoder, &eb, &h, &hb, &self.views, &self.targets, &self.cfg).unwrap();
        let value = tape.value(terms.total).item();
        if !grad {
            return (value, Vec::new());
        }
        tape.backward(terms.total).unwrap();
        let grads = eb
            .vars()
            .iter()
            .zip(enc.tensors())
            .chain(hb.vars().iter().zip(head.tensors()))
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        (value, grads)
    }

    /// Worst relative error over `samples` randomly chosen parameter entries.
    pub fn max_err(&self, samples: usize, seed: u64) -> f64 {
        let enc = &self.encoder.params;
        let head = &self.head.params;
        let (_, grads) = self.loss(enc, head, true);
        let n_enc = enc.len();
        let mut rng = stream(seed, &[0x5A]);
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let p = rng.random_range(0..grads.len());
            let j = rng.random_range(0..grads[p].numel());
            let perturbed = |delta: f64| {
                let (mut e, mut h) = (enc.clone(), head.clone());
                let t = if p < n_enc {
                    &mut e.tensors_mut()[p]
                } else {
                    &mut h.tensors_mut()[p - n_enc]
                };
                t.data_mut()[j] += delta;
                self.loss(&e, &h, false).0
            };
            let num = (perturbed(FD_STEP) - perturbed(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[p].data()[j], num));
        }
        worst
    }
}
