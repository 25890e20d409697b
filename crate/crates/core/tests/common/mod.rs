#![allow(dead_code)]

use iclm::aggregate::{prob_space_logits, AggregationConfig};
use iclm::data::synth::{all_words, synth_generate, SynthConfig};
use iclm::data::{filter_split, Batcher, Split, TaskInstance, TokenBatch};
use iclm::lm::{LmConfig, LmModule};
use iclm::mi::{conditional_distribution, mi_tensor};
use iclm::model::{ForwardOptions, IclmModel, LossWeights};
use iclm::nn::Module;
use iclm::rng::{normal_vec, stream};
use iclm::router::{init_centroids, kmeans_fit, vq_route, Codebook, Strategy};
use iclm::run::router_points;
use iclm::tensor::shared_batch_norm;
use iclm::tokenizer::Tokenizer;
use iclm::Tensor;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;

#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= ABS_TOL + REL_TOL * a.abs().max(n.abs())
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences on every coordinate of every input.
pub fn check_grads<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F) -> Result<(), GradMismatch>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s).unwrap())
        .collect();
    let loss = f(&leaves);
    loss.backward().unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(Tensor::grad_or_zeros).collect();
    let eval = |k: usize, i: usize, delta: f64| -> f64 {
        let consts: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(j, (d, s))| {
                let mut d = d.clone();
                if j == k {
                    d[i] += delta;
                }
                Tensor::new(d, s).unwrap()
            })
            .collect();
        f(&consts).item()
    };
    for (k, (d, _)) in inputs.iter().enumerate() {
        for i in 0..d.len() {
            let numeric = (eval(k, i, STEP) - eval(k, i, -STEP)) / (2.0 * STEP);
            if !close(analytic[k][i], numeric) {
                return Err(GradMismatch {
                    input: k,
                    index: i,
                    analytic: analytic[k][i],
                    numeric,
                });
            }
        }
    }
    Ok(())
}

pub fn randn(seed: u64, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let n = shape.iter().product();
    (
        normal_vec(&mut stream(seed, "test-input"), n, 1.0),
        shape.to_vec(),
    )
}

/// Fixed random weights so that a scalar reduction is sensitive to every
/// output coordinate.
pub fn probe(seed: u64, shape: &[usize]) -> Tensor {
    let (d, s) = randn(seed ^ 0x5eed, shape);
    Tensor::new(d, &s).unwrap()
}

pub fn weighted_sum(t: &Tensor, seed: u64) -> Tensor {
    t.mul(&probe(seed, t.shape())).unwrap().sum()
}

pub type Inputs = Vec<(Vec<f64>, Vec<usize>)>;

/// One finite-difference case: a scalar function of random inputs.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Inputs,
    pub f: Box<dyn Fn(&[Tensor]) -> Tensor>,
}

fn case(name: &'static str, inputs: Inputs, f: impl Fn(&[Tensor]) -> Tensor + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

fn positive(seed: u64, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (d, s) = randn(seed, shape);
    (d.iter().map(|x| x.abs() + 0.5).collect(), s)
}

/// Every differentiable tensor operation, plus the composite losses built
/// from them.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        case("matmul", vec![randn(1, &[2, 3]), randn(2, &[3, 1])], |v| {
            weighted_sum(&v[0].matmul(&v[1]).unwrap(), 3)
        }),
        case(
            "matmul_batched_lhs",
            vec![randn(4, &[2, 2, 3]), randn(5, &[3, 4])],
            |v| weighted_sum(&v[0].matmul(&v[1]).unwrap(), 6),
        ),
        case(
            "bmm",
            vec![randn(7, &[2, 3, 4]), randn(8, &[2, 4, 2])],
            |v| weighted_sum(&v[0].bmm(&v[1], false).unwrap(), 9),
        ),
        case(
            "bmm_transposed",
            vec![randn(10, &[2, 3, 4]), randn(11, &[2, 5, 4])],
            |v| weighted_sum(&v[0].bmm(&v[1], true).unwrap(), 12),
        ),
        case(
            "add_sub_mul",
            vec![randn(13, &[2, 3]), randn(14, &[2, 3])],
            |v| {
                let a = v[0].add(&v[1]).unwrap();
                let b = v[0].sub(&v[1]).unwrap();
                weighted_sum(&a.mul(&b).unwrap().mul(&v[0]).unwrap(), 15)
            },
        ),
        case(
            "suffix_broadcast",
            vec![randn(16, &[2, 3, 4]), randn(17, &[4])],
            |v| {
                let a = v[0].add_suffix(&v[1]).unwrap();
                weighted_sum(&a.mul_suffix(&v[1]).unwrap(), 18)
            },
        ),
        case(
            "prefix_broadcast",
            vec![randn(19, &[2, 3, 4]), randn(20, &[2, 3])],
            |v| {
                let a = v[0].add_prefix(&v[1]).unwrap();
                weighted_sum(&a.mul_prefix(&v[1]).unwrap(), 21)
            },
        ),
        case("scale_shift_neg", vec![randn(22, &[5])], |v| {
            weighted_sum(&v[0].scale(-2.5).add_scalar(3.0).neg(), 23)
        }),
        case("gelu", vec![randn(24, &[3, 4])], |v| {
            weighted_sum(&v[0].gelu(), 25)
        }),
        case("softmax_axis0", vec![randn(26, &[3, 4])], |v| {
            weighted_sum(&v[0].softmax(0).unwrap(), 27)
        }),
        case("softmax_middle_axis", vec![randn(28, &[2, 3, 4])], |v| {
            weighted_sum(&v[0].softmax(1).unwrap(), 29)
        }),
        case("causal_softmax", vec![randn(30, &[2, 4, 4])], |v| {
            weighted_sum(&v[0].causal_softmax().unwrap(), 31)
        }),
        case("exp", vec![randn(32, &[5])], |v| {
            weighted_sum(&v[0].exp(), 33)
        }),
        case("log", vec![positive(34, &[6])], |v| {
            weighted_sum(&v[0].log(), 35)
        }),
        case("sqrt", vec![positive(36, &[6])], |v| {
            weighted_sum(&v[0].sqrt(), 37)
        }),
        // Points away from the kink.
        case(
            "clamp_min",
            vec![(vec![-1.0, -0.3, 0.4, 2.0], vec![4])],
            |v| weighted_sum(&v[0].clamp_min(0.1), 38),
        ),
        case(
            "layer_norm",
            vec![randn(39, &[2, 3, 5]), randn(40, &[5]), randn(41, &[5])],
            |v| weighted_sum(&v[0].layer_norm(&v[1], &v[2], 1e-5).unwrap(), 42),
        ),
        case(
            "batch_norm_masked",
            vec![randn(43, &[6, 3]), randn(44, &[3]), randn(45, &[3])],
            |v| {
                let mask = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
                weighted_sum(
                    &v[0]
                        .batch_norm_train(&v[1], &v[2], Some(&mask), 1e-5)
                        .unwrap()
                        .0,
                    46,
                )
            },
        ),
        case(
            "shared_batch_norm",
            vec![
                randn(47, &[2, 3, 4]),
                randn(48, &[2, 3, 4]),
                randn(49, &[4]),
                randn(50, &[4]),
            ],
            |v| {
                let (out, _) = shared_batch_norm(&v[..2], &v[2], &v[3], None, 1e-5).unwrap();
                weighted_sum(&out[0], 51)
                    .add(&weighted_sum(&out[1], 52))
                    .unwrap()
            },
        ),
        case("embedding", vec![randn(53, &[5, 3])], |v| {
            weighted_sum(&v[0].embedding(&[4, 0, 4, 2], &[2, 2]).unwrap(), 54)
        }),
        case("permute", vec![randn(55, &[2, 3, 4])], |v| {
            weighted_sum(&v[0].permute(&[2, 0, 1]).unwrap(), 56)
        }),
        case("transpose2", vec![randn(57, &[3, 4])], |v| {
            weighted_sum(&v[0].transpose2().unwrap(), 58)
        }),
        case(
            "concat0",
            vec![randn(59, &[2, 3]), randn(60, &[1, 3])],
            |v| weighted_sum(&Tensor::concat0(&v[..2]).unwrap(), 61),
        ),
        case("index_select0", vec![randn(62, &[4, 2])], |v| {
            weighted_sum(&v[0].index_select0(&[3, 1, 3]).unwrap(), 63)
        }),
        case("sum_axis", vec![randn(64, &[2, 3, 4])], |v| {
            weighted_sum(&v[0].sum_axis(1).unwrap(), 65)
        }),
        case("reshape", vec![randn(66, &[2, 6])], |v| {
            weighted_sum(&v[0].reshape(&[3, 4]).unwrap(), 67)
        }),
        case("masked_mean", vec![randn(68, &[2, 3, 4])], |v| {
            weighted_sum(
                &v[0].masked_mean(&[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
                69,
            )
        }),
        case("mean", vec![randn(70, &[3, 2])], |v| v[0].mean()),
        case("cross_entropy", vec![randn(71, &[2, 3, 5])], |v| {
            v[0].cross_entropy(&[0, 4, 2, 1, 3, 3], &[1.0, 0.0, 1.0, 1.0, 1.0, 0.0])
                .unwrap()
        }),
        case("mse", vec![randn(72, &[3, 2]), randn(73, &[3, 2])], |v| {
            v[0].mse(&v[1]).unwrap()
        }),
        case(
            "mi_loss",
            vec![randn(74, &[4, 3]), randn(75, &[4, 5])],
            |v| {
                let p = v[0].softmax(1).unwrap();
                let q = v[1].softmax(1).unwrap();
                mi_tensor(&p, &q).unwrap()
            },
        ),
        case(
            "mi_loss_from_hidden_states",
            vec![randn(76, &[3, 4, 6]), randn(77, &[3, 4, 6])],
            |v| {
                let mask = [1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
                let p = conditional_distribution(&v[0].masked_mean(&mask).unwrap()).unwrap();
                let q = conditional_distribution(&v[1].masked_mean(&mask).unwrap()).unwrap();
                mi_tensor(&p, &q).unwrap()
            },
        ),
        case(
            "prob_space_aggregation",
            vec![randn(78, &[2, 3, 4]), randn(79, &[2, 3, 4])],
            |v| {
                let w = [
                    Tensor::new(vec![0.3, 0.9], &[2]).unwrap(),
                    Tensor::new(vec![0.6, 0.2], &[2]).unwrap(),
                ];
                let l = prob_space_logits(&v[..2], &w).unwrap();
                l.cross_entropy(&[0, 1, 2, 3, 0, 1], &[1.0; 6]).unwrap()
            },
        ),
    ]
}

/// Run every case; returns the names of the failing ones with details.
pub fn failing_grad_cases() -> Vec<String> {
    grad_cases()
        .into_iter()
        .filter_map(|c| {
            check_grads(&c.inputs, &c.f)
                .err()
                .map(|m| format!("{}: {m:?}", c.name))
        })
        .collect()
}

/// Mean squared error as plain arithmetic.
fn mse_plain(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Routing loss with the stop-gradient arguments passed separately:
/// `mse(h, c_sg) + nu * mse(c, h_sg)` over the assigned centroid rows.
pub fn vq_loss_detached(
    h: &[f64],
    c: &[f64],
    h_sg: &[f64],
    c_sg: &[f64],
    assign: &[usize],
    d: usize,
    nu: f64,
) -> f64 {
    let pick = |src: &[f64]| -> Vec<f64> {
        assign
            .iter()
            .flat_map(|&k| src[k * d..(k + 1) * d].to_vec())
            .collect()
    };
    mse_plain(h, &pick(c_sg)) + nu * mse_plain(&pick(c), h_sg)
}

/// Check the routing loss gradient against finite differences of the
/// detached composition, where each stop-gradient argument is frozen at its
/// current value. Returns the first mismatch.
pub fn check_vq_split(seed: u64) -> Result<(), GradMismatch> {
    let (t, d, n, nu) = (3, 4, 2, 0.25);
    let (h0, _) = randn(seed, &[t * d]);
    let (c0, _) = randn(seed + 1, &[n * d]);
    let cents: Vec<Vec<f64>> = c0.chunks(d).map(<[f64]>::to_vec).collect();
    let book = Codebook::with_centroids(Strategy::Vq, cents, nu, 1.0).unwrap();
    let h = Tensor::param(h0.clone(), &[1, t, d]).unwrap();
    let decision = vq_route(&h, &[1.0; 3], &book).unwrap();
    decision.loss.backward().unwrap();
    let assign = vec![decision.chosen[0]; t];
    let gh = h.grad_or_zeros();
    let gc = book.centroids.grad().unwrap_or_else(|| vec![0.0; n * d]);
    let fd = |x: &[f64], i: usize, f: &dyn Fn(&[f64]) -> f64| {
        let (mut up, mut dn) = (x.to_vec(), x.to_vec());
        up[i] += STEP;
        dn[i] -= STEP;
        (f(&up) - f(&dn)) / (2.0 * STEP)
    };
    for i in 0..h0.len() {
        let numeric = fd(&h0, i, &|x| {
            vq_loss_detached(x, &c0, &h0, &c0, &assign, d, nu)
        });
        if !close(gh[i], numeric) {
            return Err(GradMismatch {
                input: 0,
                index: i,
                analytic: gh[i],
                numeric,
            });
        }
    }
    for i in 0..c0.len() {
        let numeric = fd(&c0, i, &|x| {
            vq_loss_detached(&h0, x, &h0, &c0, &assign, d, nu)
        });
        if !close(gc[i], numeric) {
            return Err(GradMismatch {
                input: 1,
                index: i,
                analytic: gc[i],
                numeric,
            });
        }
    }
    Ok(())
}

/// A small model over generated data, for structural tests.
pub struct Tiny {
    pub tok: Tokenizer,
    pub data: Vec<TaskInstance>,
    pub model: IclmModel,
}

pub fn tiny_data(seed: u64, n_train: usize) -> Vec<TaskInstance> {
    let cfg = SynthConfig {
        seed,
        n_train,
        n_test: 8,
        ..SynthConfig::default()
    };
    filter_split(&synth_generate(&cfg).unwrap(), Split::Train)
}

pub fn tiny_lm_config(tok: &Tokenizer) -> LmConfig {
    LmConfig {
        vocab_size: tok.len(),
        max_seq_len: 40,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        has_lm_head: true,
    }
}

pub fn tiny(strategy: Strategy, n: usize, weights: LossWeights, seed: u64) -> Tiny {
    let data = tiny_data(seed, 48);
    let words = all_words();
    let tok = Tokenizer::build(words.iter().copied());
    let base = LmModule::new("base", tiny_lm_config(&tok), &mut stream(seed, "tiny/base")).unwrap();
    let points = router_points(&base, &tok, &data, 16).unwrap();
    let book = match strategy {
        Strategy::Kmeans => kmeans_fit(&points, n, 4, seed).unwrap(),
        s => Codebook::with_centroids(
            s,
            init_centroids(&points, n, seed).unwrap(),
            weights.nu,
            1.0,
        )
        .unwrap(),
    };
    let model = IclmModel::from_base(
        &base,
        n,
        book,
        AggregationConfig::default(),
        weights,
        &mut stream(seed, "tiny/model"),
    )
    .unwrap();
    Tiny { tok, data, model }
}

impl Tiny {
    pub fn batch(&self, rows: std::ops::Range<usize>) -> TokenBatch {
        let idx: Vec<usize> = rows.collect();
        Batcher {
            tokenizer: &self.tok,
            data: &self.data,
            max_len: 40,
        }
        .batch(&idx)
        .unwrap()
    }
}

/// Finite-difference check of the full training loss with respect to a
/// sample of coordinates in every parameter whose path to the loss has no
/// stop-gradient (invariant, specific and aggregation parameters).
pub fn check_model_grads(t: &Tiny, batch: &TokenBatch, per_param: usize) -> Result<usize, String> {
    let opts = ForwardOptions {
        train: true,
        ..Default::default()
    };
    let model = t.model.fresh_copy().unwrap();
    let out = model.forward(batch, &opts).unwrap();
    out.total.backward().unwrap();
    let routes = out.routing.chosen.clone();
    let eligible = |name: &str| {
        name.starts_with("inv.") || name.starts_with("spec") || name.starts_with("agg.")
    };
    let mut checked = 0;
    let params: Vec<(String, Vec<f64>, Vec<f64>)> = model
        .params()
        .iter()
        .filter(|p| p.trainable() && eligible(&p.name))
        .map(|p| {
            (
                p.name.clone(),
                p.data().to_vec(),
                p.grad().unwrap_or_else(|| vec![0.0; p.data().len()]),
            )
        })
        .collect();
    for (pi, (name, data, grad)) in params.iter().enumerate() {
        let mut rng = stream(pi as u64, "fd/coords");
        for _ in 0..per_param.min(data.len()) {
            let i = rand::Rng::gen_range(&mut rng, 0..data.len());
            let eval = |delta: f64| -> f64 {
                let mut m = t.model.fresh_copy().unwrap();
                let mut d = data.clone();
                d[i] += delta;
                m.params_mut()
                    .into_iter()
                    .find(|p| &p.name == name)
                    .unwrap()
                    .set_data(d)
                    .unwrap();
                let o = m.forward(batch, &opts).unwrap();
                assert_eq!(o.routing.chosen, routes, "perturbation changed routing");
                o.total.item()
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            if !close(grad[i], numeric) {
                return Err(format!(
                    "{name}[{i}]: analytic {} vs numeric {numeric}",
                    grad[i]
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}
