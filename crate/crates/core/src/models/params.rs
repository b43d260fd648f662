//! Named parameter storage, initialization, and checkpoint files.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{xavier_init, BnStats, Gradients, Tape, Tensor, Value};
use crate::error::{Error, Result};
use crate::models::features::{
    flat_width, node_width, EDGE_FLAG_WIDTH, NODE_FLAG_WIDTH, TARGET_WIDTH,
};
use crate::models::{Arch, ModelSpec};
use crate::types::EventType;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

struct ParamDef {
    name: String,
    rows: usize,
    cols: usize,
    kind: ParamKind,
}

/// All learned tensors plus batch-norm running statistics for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor>,
    pub bn: BTreeMap<String, BnStats>,
}

impl ModelState {
    /// Initializes every fully connected layer with Xavier uniform draws,
    /// biases at zero, batch-norm at identity. Draw order is the fixed
    /// layout order, so a given rng state yields identical parameters.
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<ModelState> {
        spec.validate()?;
        if spec.arch == Arch::RuleBased {
            return Err(Error::Model(
                "rule_based has no learned parameters".into(),
            ));
        }
        let mut params = BTreeMap::new();
        let mut bn = BTreeMap::new();
        for def in layout(spec) {
            let tensor = match def.kind {
                ParamKind::Weight => xavier_init(def.rows, def.cols, rng)?,
                ParamKind::Bias | ParamKind::BnBeta => Tensor::zeros(def.rows, def.cols),
                ParamKind::BnGamma => Tensor::from_vec(def.rows, def.cols, vec![1.0; def.cols])?,
            };
            if let ParamKind::BnGamma = def.kind {
                let prefix = def.name.trim_end_matches(".gamma").to_string();
                bn.insert(prefix, BnStats::new(def.cols));
            }
            params.insert(def.name, tensor);
        }
        Ok(ModelState {
            spec: *spec,
            params,
            bn,
        })
    }

    pub fn total_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let doc = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            state: self.clone(),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &doc)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ModelState, String)> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Data(format!("cannot open checkpoint {}: {e}", path.display()))
        })?;
        let doc: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                doc.version
            )));
        }
        Ok((doc.state, doc.config_hash))
    }
}

/// Versioned on-disk checkpoint: named parameter blocks with shape headers
/// (serialized tensors) plus the producing config's hash.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: String,
    state: ModelState,
}

/// Tape handles for every parameter of a bound model.
#[derive(Debug)]
pub struct BoundParams {
    values: BTreeMap<String, Value>,
}

impl BoundParams {
    /// Pushes every parameter onto the tape as a leaf, in sorted name order.
    pub fn bind(tape: &mut Tape, params: &BTreeMap<String, Tensor>) -> BoundParams {
        let values = params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect();
        BoundParams { values }
    }

    /// Panics on unknown names: the layout and the forward code are written
    /// together, so a miss is a bug, not an input error.
    pub fn get(&self, name: &str) -> Value {
        *self
            .values
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradient per parameter; zeros for parameters the loss does not reach.
    pub fn grads(
        &self,
        tape: &Tape,
        grads: &Gradients,
    ) -> BTreeMap<String, Tensor> {
        self.values
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| {
                    let t = tape.value(v);
                    Tensor::zeros(t.rows(), t.cols())
                });
                (name.clone(), g)
            })
            .collect()
    }
}

fn push_linear(defs: &mut Vec<ParamDef>, prefix: &str, inp: usize, out: usize) {
    defs.push(ParamDef {
        name: format!("{prefix}.w"),
        rows: inp,
        cols: out,
        kind: ParamKind::Weight,
    });
    defs.push(ParamDef {
        name: format!("{prefix}.b"),
        rows: 1,
        cols: out,
        kind: ParamKind::Bias,
    });
}

fn push_mlp(defs: &mut Vec<ParamDef>, prefix: &str, inp: usize, hid: usize, out: usize) {
    push_linear(defs, &format!("{prefix}.l1"), inp, hid);
    defs.push(ParamDef {
        name: format!("{prefix}.bn.gamma"),
        rows: 1,
        cols: hid,
        kind: ParamKind::BnGamma,
    });
    defs.push(ParamDef {
        name: format!("{prefix}.bn.beta"),
        rows: 1,
        cols: hid,
        kind: ParamKind::BnBeta,
    });
    push_linear(defs, &format!("{prefix}.l2"), hid, hid);
    push_linear(defs, &format!("{prefix}.l3"), hid, out);
}

fn push_gnn(defs: &mut Vec<ParamDef>, prefix: &str, node_in: usize, hid: usize) {
    push_mlp(
        defs,
        &format!("{prefix}.fe"),
        2 * node_in + EDGE_FLAG_WIDTH,
        hid,
        hid,
    );
    push_mlp(defs, &format!("{prefix}.fo"), hid + NODE_FLAG_WIDTH, hid, hid);
}

fn push_gru(defs: &mut Vec<ParamDef>, prefix: &str, inp: usize, hid: usize, layers: usize) {
    for l in 0..layers {
        let in_l = if l == 0 { inp } else { hid };
        for gate in ["r", "z", "n"] {
            push_linear(defs, &format!("{prefix}.l{l}.x{gate}"), in_l, hid);
            defs.push(ParamDef {
                name: format!("{prefix}.l{l}.h{gate}.w"),
                rows: hid,
                cols: hid,
                kind: ParamKind::Weight,
            });
        }
    }
}

fn push_gauss_head(defs: &mut Vec<ParamDef>, prefix: &str, inp: usize, out: usize) {
    push_linear(defs, &format!("{prefix}.mean"), inp, out);
    push_linear(defs, &format!("{prefix}.std"), inp, out);
}

/// The full, ordered parameter layout of an architecture.
fn layout(spec: &ModelSpec) -> Vec<ParamDef> {
    let h = spec.num_hid;
    let r = spec.rnn_dim;
    let fw = flat_width(spec.use_ball_velocity_input);
    let nw = node_width(spec.use_ball_velocity_input);
    let t = TARGET_WIDTH;
    let a = EventType::COUNT;
    let mut d = Vec::new();
    match spec.arch {
        Arch::RuleBased => {}
        Arch::Mlp => push_mlp(&mut d, "mlp", fw, h, t),
        Arch::Vae => {
            push_mlp(&mut d, "pri", fw, h, h);
            push_gauss_head(&mut d, "pri", h, h);
            push_mlp(&mut d, "enc", fw + t, h, h);
            push_gauss_head(&mut d, "enc", h, h);
            push_mlp(&mut d, "dec", fw + h, h, h);
            push_gauss_head(&mut d, "dec", h, t);
        }
        Arch::Gnn => {
            push_gnn(&mut d, "gnn", nw, h);
            push_linear(&mut d, "readout", h, 2);
        }
        Arch::GnnAdd => {
            push_gnn(&mut d, "gnn", nw, h);
            push_linear(&mut d, "fa", a, h);
            push_linear(&mut d, "fxe", 2, h);
            push_linear(&mut d, "readout", 3 * h, 2);
        }
        Arch::Vgnn | Arch::VgnnDecAdd => {
            push_gnn(&mut d, "pri", nw, h);
            push_gauss_head(&mut d, "pri", h, h);
            push_gnn(&mut d, "enc", nw + 2, h);
            push_gauss_head(&mut d, "enc", h, h);
            let dec_in = if spec.arch == Arch::VgnnDecAdd {
                nw + h + 2 * h
            } else {
                nw + h
            };
            push_gnn(&mut d, "dec", dec_in, h);
            push_gauss_head(&mut d, "dec", h, 2);
            if spec.arch == Arch::VgnnDecAdd {
                push_linear(&mut d, "fa", a, h);
                push_linear(&mut d, "fxe", 2, h);
            }
        }
        Arch::Rnn => {
            push_mlp(&mut d, "enc", fw + r, h, h);
            push_mlp(&mut d, "dec", h + r, h, t);
            push_gru(&mut d, "gru", fw + h + t, r, spec.num_layer);
        }
        Arch::Vrnn => {
            push_mlp(&mut d, "pri", fw + r, h, h);
            push_gauss_head(&mut d, "pri", h, h);
            push_mlp(&mut d, "enc", fw + t + r, h, h);
            push_gauss_head(&mut d, "enc", h, h);
            push_mlp(&mut d, "dec", fw + h + r, h, h);
            push_gauss_head(&mut d, "dec", h, t);
            push_gru(&mut d, "gru", fw + h + t, r, spec.num_layer);
        }
        Arch::Grnn | Arch::GrnnDecAdd => {
            push_gnn(&mut d, "enc", nw + r, h);
            let dec_in = if spec.arch == Arch::GrnnDecAdd {
                h + r + 2 * h
            } else {
                h + r
            };
            push_gnn(&mut d, "dec", dec_in, h);
            push_linear(&mut d, "readout", h, 2);
            if spec.arch == Arch::GrnnDecAdd {
                push_linear(&mut d, "fa", a, h);
                push_linear(&mut d, "fxe", 2, h);
            }
            push_gru(&mut d, "gru", nw + h + t, r, spec.num_layer);
        }
        Arch::Gvrnn | Arch::GvrnnDecAdd => {
            push_gnn(&mut d, "pri", nw + r, h);
            push_gauss_head(&mut d, "pri", h, h);
            push_gnn(&mut d, "enc", nw + 2 + r, h);
            push_gauss_head(&mut d, "enc", h, h);
            let dec_in = if spec.arch == Arch::GvrnnDecAdd {
                h + r + 2 * h
            } else {
                h + r
            };
            push_gnn(&mut d, "dec", dec_in, h);
            push_gauss_head(&mut d, "dec", h, 2);
            if spec.arch == Arch::GvrnnDecAdd {
                push_linear(&mut d, "fa", a, h);
                push_linear(&mut d, "fxe", 2, h);
            }
            push_gru(&mut d, "gru", nw + h + t, r, spec.num_layer);
        }
    }
    d
}

fn linear_count(inp: usize, out: usize) -> usize {
    inp * out + out
}

fn mlp_count(inp: usize, hid: usize, out: usize) -> usize {
    // l1 + batchnorm gamma/beta + l2 + l3
    linear_count(inp, hid) + 2 * hid + linear_count(hid, hid) + linear_count(hid, out)
}

fn gnn_count(node_in: usize, hid: usize) -> usize {
    mlp_count(2 * node_in + EDGE_FLAG_WIDTH, hid, hid) + mlp_count(hid + NODE_FLAG_WIDTH, hid, hid)
}

fn gru_count(inp: usize, hid: usize, layers: usize) -> usize {
    let cell = |i: usize| 3 * (linear_count(i, hid) + hid * hid);
    cell(inp) + layers.saturating_sub(1) * cell(hid)
}

fn head_count(inp: usize, out: usize) -> usize {
    2 * linear_count(inp, out)
}

/// Closed-form total parameter count; a pure function of the spec.
///
/// Dimension shorthand: H = num_hid, R = rnn_dim, F = flat input width,
/// N = node feature width, T = 44 (22 players x 2), A = 6 event classes.
/// Each architecture is a sum of mlp blocks `in*H+H + 2H + H*H+H + H*out+out`,
/// linear layers `in*out+out`, Gaussian head pairs, and GRU cells
/// `3*(in*R + R*R + R)` per layer.
pub fn expected_param_count(spec: &ModelSpec) -> usize {
    let h = spec.num_hid;
    let r = spec.rnn_dim;
    let fw = flat_width(spec.use_ball_velocity_input);
    let nw = node_width(spec.use_ball_velocity_input);
    let t = TARGET_WIDTH;
    let a = EventType::COUNT;
    match spec.arch {
        Arch::RuleBased => 0,
        Arch::Mlp => mlp_count(fw, h, t),
        Arch::Vae => {
            mlp_count(fw, h, h)
                + head_count(h, h)
                + mlp_count(fw + t, h, h)
                + head_count(h, h)
                + mlp_count(fw + h, h, h)
                + head_count(h, t)
        }
        Arch::Gnn => gnn_count(nw, h) + linear_count(h, 2),
        Arch::GnnAdd => {
            gnn_count(nw, h) + linear_count(a, h) + linear_count(2, h) + linear_count(3 * h, 2)
        }
        Arch::Vgnn => {
            gnn_count(nw, h)
                + head_count(h, h)
                + gnn_count(nw + 2, h)
                + head_count(h, h)
                + gnn_count(nw + h, h)
                + head_count(h, 2)
        }
        Arch::VgnnDecAdd => {
            gnn_count(nw, h)
                + head_count(h, h)
                + gnn_count(nw + 2, h)
                + head_count(h, h)
                + gnn_count(nw + 3 * h, h)
                + head_count(h, 2)
                + linear_count(a, h)
                + linear_count(2, h)
        }
        Arch::Rnn => {
            mlp_count(fw + r, h, h) + mlp_count(h + r, h, t) + gru_count(fw + h + t, r, spec.num_layer)
        }
        Arch::Vrnn => {
            mlp_count(fw + r, h, h)
                + head_count(h, h)
                + mlp_count(fw + t + r, h, h)
                + head_count(h, h)
                + mlp_count(fw + h + r, h, h)
                + head_count(h, t)
                + gru_count(fw + h + t, r, spec.num_layer)
        }
        Arch::Grnn => {
            gnn_count(nw + r, h)
                + gnn_count(h + r, h)
                + linear_count(h, 2)
                + gru_count(nw + h + t, r, spec.num_layer)
        }
        Arch::GrnnDecAdd => {
            gnn_count(nw + r, h)
                + gnn_count(3 * h + r, h)
                + linear_count(h, 2)
                + linear_count(a, h)
                + linear_count(2, h)
                + gru_count(nw + h + t, r, spec.num_layer)
        }
        Arch::Gvrnn => {
            gnn_count(nw + r, h)
                + head_count(h, h)
                + gnn_count(nw + 2 + r, h)
                + head_count(h, h)
                + gnn_count(h + r, h)
                + head_count(h, 2)
                + gru_count(nw + h + t, r, spec.num_layer)
        }
        Arch::GvrnnDecAdd => {
            gnn_count(nw + r, h)
                + head_count(h, h)
                + gnn_count(nw + 2 + r, h)
                + head_count(h, h)
                + gnn_count(3 * h + r, h)
                + head_count(h, 2)
                + linear_count(a, h)
                + linear_count(2, h)
                + gru_count(nw + h + t, r, spec.num_layer)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::seeded_rng;

    #[test]
    fn param_counts_match_formula() {
        for arch in Arch::ALL {
            if arch == Arch::RuleBased {
                continue;
            }
            for bv in [true, false] {
                let mut spec = ModelSpec::new(arch);
                spec.use_ball_velocity_input = bv;
                let state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
                assert_eq!(
                    state.total_params(),
                    expected_param_count(&spec),
                    "arch {arch:?} bv {bv}"
                );
            }
        }
    }

    #[test]
    fn stacked_gru_layers_add_params() {
        let mut spec = ModelSpec::new(Arch::Rnn);
        spec.num_layer = 2;
        let state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        assert_eq!(state.total_params(), expected_param_count(&spec));
        let single = expected_param_count(&ModelSpec::new(Arch::Rnn));
        assert!(state.total_params() > single);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::new(Arch::Grnn);
        let a = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        let b = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        assert_eq!(a, b);
        let c = ModelState::init(&spec, &mut seeded_rng(1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let spec = ModelSpec::new(Arch::Gnn);
        let state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        state.save(&path, "abc123").unwrap();
        let (loaded, hash) = ModelState::load(&path).unwrap();
        assert_eq!(loaded, state);
        assert_eq!(hash, "abc123");
    }

    #[test]
    fn rule_based_has_no_state() {
        assert!(ModelState::init(&ModelSpec::new(Arch::RuleBased), &mut seeded_rng(0)).is_err());
    }
}
