//! Finite-difference verification suite.
//!
//! Checks the analytic gradient of every differentiable primitive and of
//! the composed model (backbone + attention gate + relation learning +
//! fusion + losses) against central differences in f64. The composed
//! checks use eps = 1e-5 to keep perturbations clear of relu/max kinks;
//! all comparisons are against the 1e-4 relative-error budget.

use crate::arl::{build_topk_graph, Arl, ArlConfig};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::Result;
use crate::fusion::{AttentionFusion, FusionConfig};
use crate::lrp::{Lrp, LrpConfig};
use crate::model::{Model, ModelConfig};
use crate::objective::{loss_on_tape, LabelVector};
use crate::optim::grad_check;
use crate::params::ParamStore;
use crate::tape::{Tape, Val};
use crate::tensor::{rand_tensor, seeded_rng, Tensor};

/// Relative-error budget for every check.
pub const GRAD_TOLERANCE: f64 = 1e-4;

const PRIMITIVE_EPS: f64 = 1e-4;
const COMPOSITE_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOLERANCE
    }
}

/// Split a flat point into tensors of the given shapes.
fn split_point(point: &Tensor<f64>, shapes: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::from_parts(
            s.clone(),
            point.data()[off..off + n].to_vec(),
        ));
        off += n;
    }
    out
}

/// Check one taped computation at several random points. The point is the
/// concatenation of all differentiable inputs; the output is scalarized
/// with fixed random coefficients.
fn check_taped(
    name: &str,
    seed: u64,
    points: usize,
    eps: f64,
    shapes: &[Vec<usize>],
    ranges: &[(f64, f64)],
    build: &dyn Fn(&mut Tape<f64>, &[Val]) -> Result<Val>,
) -> Result<CheckOutcome> {
    assert_eq!(shapes.len(), ranges.len());
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut rng = seeded_rng(seed, 20);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let mut data = Vec::with_capacity(total);
        for (s, &(lo, hi)) in shapes.iter().zip(ranges) {
            let n: usize = s.iter().product();
            for _ in 0..n {
                let u: f64 = rand::Rng::random(&mut rng);
                data.push(lo + (hi - lo) * u);
            }
        }
        let point = Tensor::from_parts(vec![total], data);

        // fixed scalarization coefficients per point
        let coeff_seed: u64 = rand::Rng::random(&mut rng);
        let f = |p: &Tensor<f64>| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let pieces = split_point(p, shapes);
            let vals: Vec<Val> = pieces.into_iter().map(|t| tape.constant(t)).collect();
            let out = build(&mut tape, &vals)?;
            let out_n = tape.value(out).numel();
            let loss = if out_n == 1 {
                out
            } else {
                let mut crng = seeded_rng(coeff_seed, 21);
                let coeffs: Vec<f64> = (0..out_n)
                    .map(|_| rand::Rng::random::<f64>(&mut crng) * 2.0 - 1.0)
                    .collect();
                let flat = tape.reshape(out, vec![out_n])?;
                tape.dot_const(flat, &coeffs)?
            };
            tape.backward(loss)?;
            let mut grad = Vec::with_capacity(p.numel());
            for &v in &vals {
                match tape.grad(v) {
                    Some(g) => grad.extend_from_slice(g),
                    None => grad.extend(std::iter::repeat(0.0).take(tape.value(v).numel())),
                }
            }
            Ok((tape.value(loss).item(), grad))
        };
        let report = grad_check(&f, &point, eps)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(CheckOutcome {
        name: name.into(),
        points,
        max_rel_err: worst,
    })
}

/// Gradient checks for every forward primitive.
pub fn check_primitives(seed: u64, points: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let sym = (-1.0, 1.0);

    out.push(check_taped(
        "linear",
        seed,
        points,
        PRIMITIVE_EPS,
        &[vec![4, 5], vec![5], vec![4]],
        &[sym, sym, sym],
        &|tape, v| tape.linear(v[0], v[1], v[2]),
    )?);
    out.push(check_taped(
        "mat_mul",
        seed + 1,
        points,
        PRIMITIVE_EPS,
        &[vec![3, 4], vec![4, 5]],
        &[sym, sym],
        &|tape, v| tape.mat_mul(v[0], v[1]),
    )?);
    out.push(check_taped(
        "mat_mul_nt",
        seed + 2,
        points,
        PRIMITIVE_EPS,
        &[vec![3, 4], vec![5, 4]],
        &[sym, sym],
        &|tape, v| tape.mat_mul_nt(v[0], v[1]),
    )?);
    out.push(check_taped(
        "add_sub_mul",
        seed + 3,
        points,
        PRIMITIVE_EPS,
        &[vec![6], vec![6], vec![6]],
        &[sym, sym, sym],
        &|tape, v| {
            let a = tape.add(v[0], v[1])?;
            let s = tape.sub(a, v[2])?;
            tape.mul_elem(s, v[1])
        },
    )?);
    out.push(check_taped(
        "add_row_bcast",
        seed + 4,
        points,
        PRIMITIVE_EPS,
        &[vec![3, 4], vec![4]],
        &[sym, sym],
        &|tape, v| tape.add_row_bcast(v[0], v[1]),
    )?);
    out.push(check_taped(
        "affine",
        seed + 5,
        points,
        PRIMITIVE_EPS,
        &[vec![6]],
        &[sym],
        &|tape, v| tape.affine(v[0], -2.5, 0.75),
    )?);
    out.push(check_taped(
        "relu",
        seed + 6,
        points,
        PRIMITIVE_EPS,
        &[vec![8]],
        &[sym],
        &|tape, v| tape.relu(v[0]),
    )?);
    out.push(check_taped(
        "sigmoid",
        seed + 7,
        points,
        PRIMITIVE_EPS,
        &[vec![8]],
        &[(-3.0, 3.0)],
        &|tape, v| tape.sigmoid(v[0]),
    )?);
    out.push(check_taped(
        "ln",
        seed + 8,
        points,
        PRIMITIVE_EPS,
        &[vec![6]],
        &[(0.4, 2.0)],
        &|tape, v| tape.ln(v[0]),
    )?);
    out.push(check_taped(
        "clamp",
        seed + 9,
        points,
        PRIMITIVE_EPS,
        &[vec![8]],
        &[(-2.0, 2.0)],
        &|tape, v| tape.clamp(v[0], -0.5, 0.5),
    )?);
    out.push(check_taped(
        "softmax_rows",
        seed + 10,
        points,
        PRIMITIVE_EPS,
        &[vec![3, 5]],
        &[(-2.0, 2.0)],
        &|tape, v| tape.softmax_rows(v[0]),
    )?);
    out.push(check_taped(
        "layer_norm_rows",
        seed + 11,
        points,
        PRIMITIVE_EPS,
        &[vec![3, 6], vec![6], vec![6]],
        &[sym, (0.5, 1.5), sym],
        &|tape, v| tape.layer_norm_rows(v[0], v[1], v[2]),
    )?);
    out.push(check_taped(
        "conv1x1",
        seed + 12,
        points,
        PRIMITIVE_EPS,
        &[vec![3, 4, 4], vec![2, 3], vec![2]],
        &[sym, sym, sym],
        &|tape, v| tape.conv1x1(v[0], v[1], v[2]),
    )?);
    out.push(check_taped(
        "conv3x3_stride1",
        seed + 13,
        points,
        PRIMITIVE_EPS,
        &[vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
        &[sym, sym, sym],
        &|tape, v| tape.conv3x3(v[0], v[1], v[2], 1),
    )?);
    out.push(check_taped(
        "conv3x3_stride2",
        seed + 14,
        points,
        PRIMITIVE_EPS,
        &[vec![2, 6, 6], vec![3, 2, 3, 3], vec![3]],
        &[sym, sym, sym],
        &|tape, v| tape.conv3x3(v[0], v[1], v[2], 2),
    )?);
    out.push(check_taped(
        "gap",
        seed + 15,
        points,
        PRIMITIVE_EPS,
        &[vec![3, 4, 4]],
        &[sym],
        &|tape, v| tape.gap(v[0]),
    )?);
    out.push(check_taped(
        "channel_max",
        seed + 16,
        points,
        PRIMITIVE_EPS,
        &[vec![4, 3, 3]],
        &[sym],
        &|tape, v| tape.channel_max(v[0]),
    )?);
    out.push(check_taped(
        "mul_channel_bcast",
        seed + 17,
        points,
        PRIMITIVE_EPS,
        &[vec![3, 4, 4], vec![1, 4, 4]],
        &[sym, sym],
        &|tape, v| tape.mul_channel_bcast(v[0], v[1]),
    )?);
    out.push(check_taped(
        "reshape_slice_concat",
        seed + 18,
        points,
        PRIMITIVE_EPS,
        &[vec![3, 6], vec![4]],
        &[sym, sym],
        &|tape, v| {
            let left = tape.col_slice(v[0], 0, 3)?;
            let right = tape.col_slice(v[0], 3, 3)?;
            let cat = tape.concat_cols(&[right, left])?;
            let row0 = tape.row(cat, 0)?;
            let row2 = tape.row(cat, 2)?;
            let stacked = tape.stack_rows(&[row0, row2])?;
            let flat = tape.reshape(stacked, vec![12])?;
            let gathered = tape.gather(flat, &[0, 5, 7, 11])?;
            let joined = tape.concat_vec(&[gathered, v[1]])?;
            tape.dot_const(joined, &[0.3, -0.4, 1.1, 0.9, -0.2, 0.5, 0.6, -1.0])
        },
    )?);
    out.push(check_taped(
        "log1p_sum_exp",
        seed + 19,
        points,
        PRIMITIVE_EPS,
        &[vec![7]],
        &[(-4.0, 4.0)],
        &|tape, v| tape.log1p_sum_exp(v[0]),
    )?);
    out.push(check_taped(
        "sdpa",
        seed + 20,
        points,
        PRIMITIVE_EPS,
        &[vec![4, 3], vec![4, 3], vec![4, 3]],
        &[sym, sym, sym],
        &|tape, v| tape.sdpa(v[0], v[1], v[2]),
    )?);
    out.push(check_taped(
        "bce_loss",
        seed + 21,
        points,
        PRIMITIVE_EPS,
        &[vec![12]],
        &[(-3.0, 3.0)],
        &|tape, v| {
            let labels =
                LabelVector::new([1, 0, 1, 0, -1, 0, 1, 1, 0, 0, -1, 1]).expect("valid labels");
            let probs = tape.sigmoid(v[0])?;
            crate::objective::bce_on_tape(tape, probs, &labels)
        },
    )?);
    out.push(check_taped(
        "circle_loss",
        seed + 22,
        points,
        PRIMITIVE_EPS,
        &[vec![12]],
        &[(-4.0, 4.0)],
        &|tape, v| {
            let labels =
                LabelVector::new([1, 0, 1, 0, -1, 0, 1, 1, 0, 0, -1, 1]).expect("valid labels");
            crate::objective::circle_on_tape(tape, v[0], &labels)
        },
    )?);
    Ok(out)
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_hw: 16,
            stage_channels: vec![6, 8],
        },
        compression: 2,
        num_lanets: 2,
        node_dim: 4,
        token_dim: 8,
        heads: 2,
        k: 2,
        ..ModelConfig::default()
    }
}

/// Randomize the fusion weight head so gradient actually flows through the
/// encoder during checks (it is zero-initialized by design).
fn randomize_weight_head(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = seeded_rng(seed, 22);
    for name in ["fusion.weight_head.weight", "fusion.weight_head.bias"] {
        if let Some(id) = store.lookup(name) {
            let shape = store.value(id).shape().to_vec();
            let t = rand_tensor(&mut rng, shape, 0.6);
            store.set_value(id, t).expect("same shape");
        }
    }
}

/// Gradient checks through the composed modules and the full model.
pub fn check_composites(seed: u64, points: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    // full backbone on a 16x16 input, gradient w.r.t. the image
    {
        let mut rng = seeded_rng(seed, 23);
        let mut store = ParamStore::<f64>::new();
        let backbone = Backbone::build(
            BackboneConfig {
                input_hw: 16,
                stage_channels: vec![6, 8],
            },
            &mut store,
            &mut rng,
        )?;
        out.push(check_taped(
            "backbone_16x16",
            seed + 30,
            points,
            COMPOSITE_EPS,
            &[vec![3, 16, 16]],
            &[(0.0, 1.0)],
            &|tape, v| {
                let (_, pooled) = backbone.forward(tape, &store, v[0])?;
                backbone.logits(tape, &store, pooled)
            },
        )?);
    }

    // attention gate: lanet bank -> channel max -> sigmoid -> gating
    {
        let mut rng = seeded_rng(seed, 24);
        let mut store = ParamStore::<f64>::new();
        let lrp = Lrp::build(
            &LrpConfig {
                num_lanets: 2,
                compression: 2,
            },
            8,
            &mut store,
            &mut rng,
        )?;
        out.push(check_taped(
            "lrp_gate",
            seed + 31,
            points,
            COMPOSITE_EPS,
            &[vec![8, 4, 4]],
            &[(-1.0, 1.0)],
            &|tape, v| {
                let att = lrp.attention(tape, &store, v[0])?;
                Lrp::apply(tape, v[0], att)
            },
        )?);
    }

    // node extraction -> top-k graph -> message passing -> AU head
    {
        let mut rng = seeded_rng(seed, 25);
        let mut store = ParamStore::<f64>::new();
        let arl = Arl::build(
            &ArlConfig {
                node_dim: 4,
                k: 2,
                gnn_layers: 1,
            },
            8,
            &mut store,
            &mut rng,
        )?;
        out.push(check_taped(
            "arl_graph_message",
            seed + 32,
            points,
            COMPOSITE_EPS,
            &[vec![8, 4, 4]],
            &[(-1.0, 1.0)],
            &|tape, v| {
                let nodes = arl.extract_nodes(tape, &store, v[0])?;
                let graph = build_topk_graph(tape.value(nodes), 2)?;
                let passed = arl.message_pass(tape, &store, nodes, &graph)?;
                arl.au_logits(tape, &store, passed)
            },
        )?);
    }

    // fusion path with a live weight head
    {
        let mut rng = seeded_rng(seed, 26);
        let mut store = ParamStore::<f64>::new();
        let fusion = AttentionFusion::build(
            &FusionConfig {
                token_dim: 8,
                heads: 2,
                ..FusionConfig::default()
            },
            8,
            4,
            &mut store,
            &mut rng,
        )?;
        randomize_weight_head(&mut store, seed + 40);
        out.push(check_taped(
            "fusion_path",
            seed + 33,
            points,
            COMPOSITE_EPS,
            &[vec![8], vec![12, 4], vec![12], vec![12]],
            &[(-1.0, 1.0), (-1.0, 1.0), (-2.0, 2.0), (-2.0, 2.0)],
            &|tape, v| {
                let (fused, _) = fusion.forward(tape, &store, v[0], v[1], v[2], v[3])?;
                tape.sigmoid(fused)
            },
        )?);
    }

    let mut model = Model::<f64>::build(micro_config())?;
    randomize_weight_head(&mut model.store, seed + 41);
    let labels = LabelVector::new([1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0]).expect("valid");

    // full model, gradient w.r.t. the input image
    {
        let model_ref = &model;
        let f = move |p: &Tensor<f64>| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let image = tape.constant(Tensor::new(vec![3, 16, 16], p.data().to_vec())?);
            let pass = model_ref.forward_val(&mut tape, image)?;
            let loss = loss_on_tape(&mut tape, pass.probs, pass.logits, &labels, true)?;
            tape.backward(loss.total)?;
            let grad = tape
                .grad(image)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            Ok((tape.value(loss.total).item(), grad))
        };
        let mut rng = seeded_rng(seed + 35, 27);
        let mut worst = 0.0f64;
        for _ in 0..points {
            let raw = rand_tensor::<f64>(&mut rng, vec![3 * 16 * 16], 0.5);
            let point = Tensor::from_parts(
                vec![3 * 16 * 16],
                raw.data().iter().map(|v| v.abs()).collect(),
            );
            let report = grad_check(&f, &point, COMPOSITE_EPS)?;
            worst = worst.max(report.max_rel_err);
        }
        out.push(CheckOutcome {
            name: "full_model_input".into(),
            points,
            max_rel_err: worst,
        });
    }

    // full model, gradient w.r.t. every parameter
    {
        let mut rng = seeded_rng(seed + 36, 28);
        let raw = rand_tensor::<f64>(&mut rng, vec![3, 16, 16], 0.5);
        let image = Tensor::from_parts(
            vec![3, 16, 16],
            raw.data().iter().map(|v| v.abs()).collect(),
        );
        let n_params = model.store.num_scalars();
        let model_cell = std::cell::RefCell::new(model);
        let fp = |p: &Tensor<f64>| -> Result<(f64, Vec<f64>)> {
            let mut m = model_cell.borrow_mut();
            m.store.unflatten_values(p.data())?;
            m.store.zero_grads();
            let mut tape = Tape::new();
            let pass = m.forward(&mut tape, &image)?;
            let loss = loss_on_tape(&mut tape, pass.probs, pass.logits, &labels, true)?;
            tape.backward(loss.total)?;
            tape.accumulate_param_grads(&mut m.store, 1.0);
            Ok((tape.value(loss.total).item(), m.store.flatten_grads()))
        };
        let mut worst = 0.0f64;
        for _ in 0..points {
            let point = rand_tensor::<f64>(&mut rng, vec![n_params], 0.35);
            let report = grad_check(&fp, &point, COMPOSITE_EPS)?;
            worst = worst.max(report.max_rel_err);
        }
        out.push(CheckOutcome {
            name: "full_model_params".into(),
            points,
            max_rel_err: worst,
        });
    }

    Ok(out)
}

/// The whole suite at its standard size.
pub fn run_full_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = check_primitives(seed, 10)?;
    out.extend(check_composites(seed, 10)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_gradients_within_tolerance() {
        for check in check_primitives(1000, 10).unwrap() {
            assert!(
                check.passed(),
                "{} failed: max rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn composite_gradients_within_tolerance() {
        for check in check_composites(2000, 3).unwrap() {
            assert!(
                check.passed(),
                "{} failed: max rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }
}
