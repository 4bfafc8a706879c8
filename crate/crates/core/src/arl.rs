//! AU relationship learning: per-class node features from the gated
//! feature map, a per-sample top-k relation graph over cosine similarity,
//! mean-aggregation message passing, and the AU logit head.
//!
//! Graph edges are hard booleans recomputed for every input; no gradient
//! flows through edge selection, only through the node features.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::{Real, Tensor};
use crate::NUM_AU;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArlConfig {
    /// Node feature dimension.
    pub node_dim: usize,
    /// Neighbors per node in the relation graph.
    pub k: usize,
    /// Message-passing rounds.
    pub gnn_layers: usize,
}

impl Default for ArlConfig {
    fn default() -> Self {
        ArlConfig {
            node_dim: 32,
            k: 3,
            gnn_layers: 1,
        }
    }
}

impl ArlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.node_dim == 0 {
            return Err(Error::Config("node_dim must be > 0".into()));
        }
        if !(1..NUM_AU).contains(&self.k) {
            return Err(Error::Config(format!(
                "k must satisfy 1 <= k <= {}, got {}",
                NUM_AU - 1,
                self.k
            )));
        }
        if self.gnn_layers == 0 {
            return Err(Error::Config("gnn_layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-sample relation topology: `adjacency[i][j]` marks j as one of the
/// k neighbors of i. The diagonal is always false.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationGraph {
    pub adjacency: [[bool; NUM_AU]; NUM_AU],
    pub k: usize,
}

impl RelationGraph {
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_AU).filter(move |&j| self.adjacency[i][j])
    }

    /// 12x12 grid of 0/1 characters, one row per line.
    pub fn to_text_grid(&self) -> String {
        let mut out = String::with_capacity(NUM_AU * (NUM_AU + 1));
        for row in &self.adjacency {
            for &cell in row {
                out.push(if cell { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Build the top-k graph from node features: similarity is the dot product
/// of L2-normalized rows (zero-norm rows score -inf against everything),
/// self-edges are excluded, and ties break toward the lower index.
pub fn build_topk_graph<T: Real>(nodes: &Tensor<T>, k: usize) -> Result<RelationGraph> {
    if nodes.shape().len() != 2 || nodes.shape()[0] != NUM_AU {
        return Err(Error::ShapeMismatch {
            op: "build_topk_graph",
            lhs: nodes.shape().to_vec(),
            rhs: vec![NUM_AU, 0],
        });
    }
    if !(1..NUM_AU).contains(&k) {
        return Err(Error::Config(format!(
            "k must satisfy 1 <= k <= {}, got {k}",
            NUM_AU - 1
        )));
    }
    let d = nodes.shape()[1];
    let data = nodes.data();
    let norms: Vec<f64> = (0..NUM_AU)
        .map(|i| {
            data[i * d..(i + 1) * d]
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    let mut adjacency = [[false; NUM_AU]; NUM_AU];
    for i in 0..NUM_AU {
        let mut sims = [f64::NEG_INFINITY; NUM_AU];
        for (j, sim) in sims.iter_mut().enumerate() {
            if j == i || norms[i] == 0.0 || norms[j] == 0.0 {
                continue; // stays -inf
            }
            let dot: f64 = (0..d)
                .map(|c| data[i * d + c].as_f64() * data[j * d + c].as_f64())
                .sum();
            *sim = dot / (norms[i] * norms[j]);
        }
        // k selection passes; strict > keeps the lowest index on ties
        let mut taken = [false; NUM_AU];
        taken[i] = true;
        for _ in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut best_j = usize::MAX;
            for (j, &t) in taken.iter().enumerate() {
                if !t && (best_j == usize::MAX || sims[j] > best) {
                    best = sims[j];
                    best_j = j;
                }
            }
            taken[best_j] = true;
            adjacency[i][best_j] = true;
        }
    }
    Ok(RelationGraph { adjacency, k })
}

/// Node extraction, message passing, and AU logit head.
#[derive(Debug, Clone)]
pub struct Arl {
    cfg: ArlConfig,
    /// One dedicated projection per AU class.
    node_projs: Vec<(ParamId, ParamId)>,
    gnn: Vec<GnnLayer>,
    head: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct GnnLayer {
    w_self: ParamId,
    w_neighbor: ParamId,
    bias: ParamId,
}

impl Arl {
    pub fn build<T: Real>(
        cfg: &ArlConfig,
        feat_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.node_dim;
        let mut node_projs = Vec::with_capacity(NUM_AU);
        for i in 0..NUM_AU {
            let w = store.register(
                &format!("arl.node_proj{i}.weight"),
                vec![d, feat_channels],
                Init::FanInUniform {
                    fan_in: feat_channels,
                },
                rng,
            )?;
            let b = store.register(
                &format!("arl.node_proj{i}.bias"),
                vec![d],
                Init::Zeros,
                rng,
            )?;
            node_projs.push((w, b));
        }
        let mut gnn = Vec::with_capacity(cfg.gnn_layers);
        for l in 0..cfg.gnn_layers {
            let w_self = store.register(
                &format!("arl.gnn{l}.w_self"),
                vec![d, d],
                Init::FanInUniform { fan_in: d },
                rng,
            )?;
            let w_neighbor = store.register(
                &format!("arl.gnn{l}.w_neighbor"),
                vec![d, d],
                Init::FanInUniform { fan_in: d },
                rng,
            )?;
            let bias = store.register(&format!("arl.gnn{l}.bias"), vec![d], Init::Zeros, rng)?;
            gnn.push(GnnLayer {
                w_self,
                w_neighbor,
                bias,
            });
        }
        let head_w = store.register(
            "arl.head.weight",
            vec![NUM_AU, NUM_AU * d],
            Init::FanInUniform {
                fan_in: NUM_AU * d,
            },
            rng,
        )?;
        let head_b = store.register("arl.head.bias", vec![NUM_AU], Init::Zeros, rng)?;
        Ok(Arl {
            cfg: cfg.clone(),
            node_projs,
            gnn,
            head: (head_w, head_b),
        })
    }

    pub fn config(&self) -> &ArlConfig {
        &self.cfg
    }

    /// Per-class 1x1 projection applied at every spatial location, then
    /// global-average-pooled: (c,h,w) -> (12, node_dim).
    pub fn extract_nodes<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fm: Val,
    ) -> Result<Val> {
        let mut rows = Vec::with_capacity(NUM_AU);
        for &(w, b) in &self.node_projs {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let projected = tape.conv1x1(fm, wv, bv)?;
            rows.push(tape.gap(projected)?);
        }
        tape.stack_rows(&rows)
    }

    /// One or more rounds of
    /// v'_i = relu(W_self v_i + W_nb mean_{j in N(i)} v_j + b).
    pub fn message_pass<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        nodes: Val,
        graph: &RelationGraph,
    ) -> Result<Val> {
        let inv_k = 1.0 / graph.k as f64;
        let mut current = nodes;
        for layer in &self.gnn {
            let w_self = tape.param(store, layer.w_self);
            let w_nb = tape.param(store, layer.w_neighbor);
            let bias = tape.param(store, layer.bias);
            let rows: Vec<Val> = (0..NUM_AU)
                .map(|i| tape.row(current, i))
                .collect::<Result<_>>()?;
            let mut out_rows = Vec::with_capacity(NUM_AU);
            for i in 0..NUM_AU {
                let mut nb_sum: Option<Val> = None;
                for j in graph.neighbors(i) {
                    nb_sum = Some(match nb_sum {
                        None => rows[j],
                        Some(acc) => tape.add(acc, rows[j])?,
                    });
                }
                let nb_mean = tape.affine(nb_sum.expect("k >= 1"), inv_k, 0.0)?;
                let self_term = tape.mat_vec(w_self, rows[i])?;
                let nb_term = tape.mat_vec(w_nb, nb_mean)?;
                let sum = tape.add(self_term, nb_term)?;
                let sum = tape.add(sum, bias)?;
                out_rows.push(tape.relu(sum)?);
            }
            current = tape.stack_rows(&out_rows)?;
        }
        Ok(current)
    }

    /// Concatenate all node vectors and map to the 12 AU logits.
    pub fn au_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        nodes_out: Val,
    ) -> Result<Val> {
        let d = self.cfg.node_dim;
        let flat = tape.reshape(nodes_out, vec![NUM_AU * d])?;
        let w = tape.param(store, self.head.0);
        let b = tape.param(store, self.head.1);
        tape.linear(w, flat, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rand_tensor, seeded_rng};
    use rand::RngCore;

    fn nodes_from(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        let d = rows[0].len();
        let mut data = Vec::new();
        for r in &rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![NUM_AU, d], data).unwrap()
    }

    fn padded(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        // fill up to 12 rows with distinct unit vectors far from the test rows
        let d = rows[0].len();
        let mut out = rows.to_vec();
        let mut i = 0;
        while out.len() < NUM_AU {
            let mut v = vec![0.0; d];
            v[i % d] = -5.0 - i as f64;
            out.push(v);
            i += 1;
        }
        out
    }

    #[test]
    fn full_connectivity_at_max_k() {
        let mut rng = seeded_rng(1, 0);
        let nodes = rand_tensor::<f64>(&mut rng, vec![NUM_AU, 4], 1.0);
        let g = build_topk_graph(&nodes, NUM_AU - 1).unwrap();
        for i in 0..NUM_AU {
            assert!(!g.adjacency[i][i]);
            assert_eq!(g.neighbors(i).count(), NUM_AU - 1);
        }
    }

    #[test]
    fn tie_breaks_toward_lower_index() {
        // rows 0 and 1 are e1, row 2 is e2; with k=1 node 2 ties between
        // 0 and 1 (similarity 0 each) and must pick node 0
        let rows = padded(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let g = build_topk_graph(&nodes_from(rows), 1).unwrap();
        assert!(g.adjacency[0][1]);
        assert!(g.adjacency[1][0]);
        assert!(g.adjacency[2][0]);
        assert!(!g.adjacency[2][1]);
    }

    #[test]
    fn graph_is_deterministic_function_of_input() {
        let mut rng = seeded_rng(2, 0);
        let nodes = rand_tensor::<f64>(&mut rng, vec![NUM_AU, 8], 1.0);
        assert_eq!(
            build_topk_graph(&nodes, 3).unwrap(),
            build_topk_graph(&nodes, 3).unwrap()
        );
    }

    #[test]
    fn graph_invariant_under_positive_rescaling() {
        let mut rng = seeded_rng(3, 0);
        let nodes = rand_tensor::<f64>(&mut rng, vec![NUM_AU, 8], 1.0);
        let mut scaled = nodes.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        assert_eq!(
            build_topk_graph(&nodes, 4).unwrap(),
            build_topk_graph(&scaled, 4).unwrap()
        );
    }

    #[test]
    fn matches_brute_force_full_sort_reference() {
        let mut rng = seeded_rng(4, 0);
        for _ in 0..200 {
            let d = 3 + (rng.next_u32() % 6) as usize;
            let k = 1 + (rng.next_u32() % (NUM_AU as u32 - 1)) as usize;
            let nodes = rand_tensor::<f64>(&mut rng, vec![NUM_AU, d], 1.0);
            let got = build_topk_graph(&nodes, k).unwrap();

            // reference: full sort by (similarity desc, index asc)
            let data = nodes.data();
            let norm = |i: usize| -> f64 {
                data[i * d..(i + 1) * d]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            };
            for i in 0..NUM_AU {
                let mut cands: Vec<(usize, f64)> = (0..NUM_AU)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let sim = if norm(i) == 0.0 || norm(j) == 0.0 {
                            f64::NEG_INFINITY
                        } else {
                            let dot: f64 = (0..d)
                                .map(|c| data[i * d + c] * data[j * d + c])
                                .sum();
                            dot / (norm(i) * norm(j))
                        };
                        (j, sim)
                    })
                    .collect();
                cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                let expect: std::collections::BTreeSet<usize> =
                    cands[..k].iter().map(|(j, _)| *j).collect();
                let actual: std::collections::BTreeSet<usize> = got.neighbors(i).collect();
                assert_eq!(actual, expect, "node {i}, k {k}");
            }
        }
    }

    #[test]
    fn zero_norm_rows_are_least_preferred_but_graph_stays_valid() {
        let mut rows = vec![vec![0.0, 0.0]; 2];
        rows.push(vec![1.0, 0.0]);
        let g = build_topk_graph(&nodes_from(padded(&rows)), 2).unwrap();
        for i in 0..NUM_AU {
            assert_eq!(g.neighbors(i).count(), 2);
            assert!(!g.adjacency[i][i]);
        }
        // the zero row cannot be anyone's best neighbor while finite
        // similarities exist
        assert!(!g.adjacency[2][0] || g.k > NUM_AU - 2);
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let mut rng = seeded_rng(5, 0);
        let nodes = rand_tensor::<f64>(&mut rng, vec![NUM_AU, 4], 1.0);
        assert!(build_topk_graph(&nodes, 0).is_err());
        assert!(build_topk_graph(&nodes, NUM_AU).is_err());
    }

    fn build_arl(cfg: &ArlConfig, c_feat: usize, seed: u64) -> (Arl, ParamStore<f64>) {
        let mut rng = seeded_rng(seed, 0);
        let mut store = ParamStore::new();
        let arl = Arl::build(cfg, c_feat, &mut store, &mut rng).unwrap();
        (arl, store)
    }

    #[test]
    fn node_extraction_shape_is_fixed() {
        let (arl, store) = build_arl(&ArlConfig::default(), 16, 6);
        for hw in [2usize, 5] {
            let mut tape = Tape::new();
            let mut rng = seeded_rng(7, 0);
            let fm = tape.constant(rand_tensor(&mut rng, vec![16, hw, hw], 1.0));
            let nodes = arl.extract_nodes(&mut tape, &store, fm).unwrap();
            assert_eq!(tape.value(nodes).shape(), &[12, 32]);
        }
    }

    #[test]
    fn constant_map_pools_to_projection_row_sums() {
        // constant fm of 1.0: pooling a constant is that constant, so
        // v_i = W_i . 1 + b_i = row sums of W_i (zero bias at init)
        let cfg = ArlConfig {
            node_dim: 4,
            k: 2,
            gnn_layers: 1,
        };
        let (arl, store) = build_arl(&cfg, 8, 8);
        let mut tape = Tape::new();
        let ones = Tensor::new(vec![8, 3, 3], vec![1.0; 72]).unwrap();
        let fm = tape.constant(ones);
        let nodes = arl.extract_nodes(&mut tape, &store, fm).unwrap();
        for i in 0..NUM_AU {
            let w = store.value(store.lookup(&format!("arl.node_proj{i}.weight")).unwrap());
            for r in 0..4 {
                let row_sum: f64 = w.data()[r * 8..(r + 1) * 8].iter().sum();
                let got = tape.value(nodes).data()[i * 4 + r];
                assert!((got - row_sum).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_map_zero_bias_gives_zero_nodes() {
        let (arl, store) = build_arl(&ArlConfig::default(), 8, 9);
        let mut tape = Tape::new();
        let fm = tape.constant(Tensor::zeros(vec![8, 2, 2]));
        let nodes = arl.extract_nodes(&mut tape, &store, fm).unwrap();
        assert!(tape.value(nodes).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn message_pass_identity_when_neighbor_weight_is_zero() {
        let cfg = ArlConfig {
            node_dim: 3,
            k: 2,
            gnn_layers: 1,
        };
        let (arl, mut store) = build_arl(&cfg, 8, 10);
        // W_self = I, W_nb = 0, b = 0 -> v' = relu(v)
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        store
            .set_value(store.lookup("arl.gnn0.w_self").unwrap(), eye)
            .unwrap();
        store
            .set_value(store.lookup("arl.gnn0.w_neighbor").unwrap(), Tensor::zeros(vec![3, 3]))
            .unwrap();
        let mut rng = seeded_rng(11, 0);
        let nodes_t = rand_tensor::<f64>(&mut rng, vec![NUM_AU, 3], 1.0);
        let graph = build_topk_graph(&nodes_t, 2).unwrap();
        let mut tape = Tape::new();
        let nodes = tape.constant(nodes_t.clone());
        let out = arl.message_pass(&mut tape, &store, nodes, &graph).unwrap();
        for (o, v) in tape.value(out).data().iter().zip(nodes_t.data()) {
            assert_eq!(*o, v.max(0.0));
        }
    }

    #[test]
    fn message_pass_matches_brute_force_aggregation() {
        let cfg = ArlConfig {
            node_dim: 2,
            k: 2,
            gnn_layers: 1,
        };
        let (arl, store) = build_arl(&cfg, 8, 12);
        let mut rng = seeded_rng(13, 0);
        let nodes_t = rand_tensor::<f64>(&mut rng, vec![NUM_AU, 2], 1.0);
        let graph = build_topk_graph(&nodes_t, 2).unwrap();
        let mut tape = Tape::new();
        let nodes = tape.constant(nodes_t.clone());
        let out = arl.message_pass(&mut tape, &store, nodes, &graph).unwrap();

        let ws = store.value(store.lookup("arl.gnn0.w_self").unwrap());
        let wn = store.value(store.lookup("arl.gnn0.w_neighbor").unwrap());
        let b = store.value(store.lookup("arl.gnn0.bias").unwrap());
        for i in 0..NUM_AU {
            let mut mean = [0.0f64; 2];
            for j in graph.neighbors(i) {
                mean[0] += nodes_t.data()[j * 2];
                mean[1] += nodes_t.data()[j * 2 + 1];
            }
            mean[0] /= 2.0;
            mean[1] /= 2.0;
            for r in 0..2 {
                let self_term: f64 = (0..2)
                    .map(|c| ws.data()[r * 2 + c] * nodes_t.data()[i * 2 + c])
                    .sum();
                let nb_term: f64 = (0..2).map(|c| wn.data()[r * 2 + c] * mean[c]).sum();
                let expect = (self_term + nb_term + b.data()[r]).max(0.0);
                let got = tape.value(out).data()[i * 2 + r];
                assert!((got - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn au_logits_zero_for_zero_nodes() {
        let (arl, store) = build_arl(&ArlConfig::default(), 8, 14);
        let mut tape = Tape::new();
        let nodes = tape.constant(Tensor::zeros(vec![NUM_AU, 32]));
        let logits = arl.au_logits(&mut tape, &store, nodes).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn au_logits_match_independent_matvec() {
        let cfg = ArlConfig {
            node_dim: 2,
            k: 3,
            gnn_layers: 1,
        };
        let (arl, store) = build_arl(&cfg, 8, 15);
        let mut rng = seeded_rng(16, 0);
        let nodes_t = rand_tensor::<f64>(&mut rng, vec![NUM_AU, 2], 1.0);
        let mut tape = Tape::new();
        let nodes = tape.constant(nodes_t.clone());
        let logits = arl.au_logits(&mut tape, &store, nodes).unwrap();

        let w = store.value(store.lookup("arl.head.weight").unwrap());
        let b = store.value(store.lookup("arl.head.bias").unwrap());
        let flat = nodes_t.data();
        for i in 0..NUM_AU {
            let mut acc = b.data()[i];
            for j in 0..24 {
                acc += w.data()[i * 24 + j] * flat[j];
            }
            assert!((tape.value(logits).data()[i] - acc).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_reach_node_projections_through_gnn() {
        let (arl, store) = build_arl(&ArlConfig::default(), 8, 17);
        let mut tape = Tape::new();
        let mut rng = seeded_rng(18, 0);
        let fm = tape.constant(rand_tensor(&mut rng, vec![8, 3, 3], 1.0));
        let nodes = arl.extract_nodes(&mut tape, &store, fm).unwrap();
        let graph = build_topk_graph(tape.value(nodes), 3).unwrap();
        let out = arl.message_pass(&mut tape, &store, nodes, &graph).unwrap();
        let logits = arl.au_logits(&mut tape, &store, out).unwrap();
        let loss = tape.dot_const(logits, &vec![1.0; 12]).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = store.clone();
        grads.zero_grads();
        tape.accumulate_param_grads(&mut grads, 1.0);
        let norm: f64 = grads
            .iter()
            .filter(|(_, p)| p.name.starts_with("arl.node_proj"))
            .map(|(_, p)| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!(norm > 0.0, "single-stage gradient flow is broken");
    }
}
