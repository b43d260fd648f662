//! Forward-pass building blocks: linear layers, the shared three-layer MLP
//! block, GRU cells, and one graph message pass.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autodiff::{BnStats, Tape, Value};
use crate::error::{Error, Result};
use crate::models::params::BoundParams;

/// Batch-norm behavior for a forward pass: train mode computes batch
/// statistics and updates the running estimates, eval mode freezes them.
pub enum BnMode<'a> {
    Train(&'a mut BTreeMap<String, BnStats>),
    Eval(&'a BTreeMap<String, BnStats>),
}

/// Everything a block needs to extend the tape.
pub struct Ctx<'a, 'b> {
    pub tape: &'a mut Tape,
    pub bound: &'a BoundParams,
    pub bn: &'a mut BnMode<'b>,
}

impl Ctx<'_, '_> {
    pub fn linear(&mut self, prefix: &str, x: Value) -> Result<Value> {
        let w = self.bound.get(&format!("{prefix}.w"));
        let b = self.bound.get(&format!("{prefix}.b"));
        let xw = self.tape.matmul(x, w)?;
        self.tape.add_row(xw, b)
    }

    /// linear -> ELU -> batchnorm -> linear -> ELU -> linear, with an inert
    /// dropout (p = 0) after the second ELU. Batch statistics come from the
    /// whole minibatch in train mode and the running averages in eval mode.
    pub fn mlp_block(&mut self, prefix: &str, x: Value) -> Result<Value> {
        self.mlp_block_impl(prefix, x, false)
    }

    /// [`Ctx::mlp_block`] with per-instance normalization: statistics are
    /// taken over the rows of this call's input in both phases. Graph
    /// blocks use this because their rows are one sample's edges or nodes,
    /// whose distribution shifts with the recurrent state; frozen running
    /// averages cannot follow that, per-graph statistics can.
    pub fn mlp_block_instance_norm(&mut self, prefix: &str, x: Value) -> Result<Value> {
        self.mlp_block_impl(prefix, x, true)
    }

    fn mlp_block_impl(&mut self, prefix: &str, x: Value, instance: bool) -> Result<Value> {
        let h1 = self.linear(&format!("{prefix}.l1"), x)?;
        let a1 = self.tape.elu(h1);
        let gamma = self.bound.get(&format!("{prefix}.bn.gamma"));
        let beta = self.bound.get(&format!("{prefix}.bn.beta"));
        let bn_name = format!("{prefix}.bn");
        let normed = if instance {
            self.tape.batchnorm_instance(a1, gamma, beta)?
        } else {
            match self.bn {
                BnMode::Train(stats) => {
                    let s = stats.get_mut(&bn_name).ok_or_else(|| {
                        Error::Model(format!("missing batchnorm stats for {bn_name}"))
                    })?;
                    self.tape.batchnorm_train(a1, gamma, beta, s)?
                }
                BnMode::Eval(stats) => {
                    let s = stats.get(&bn_name).ok_or_else(|| {
                        Error::Model(format!("missing batchnorm stats for {bn_name}"))
                    })?;
                    self.tape.batchnorm_eval(a1, gamma, beta, s)?
                }
            }
        };
        let h2 = self.linear(&format!("{prefix}.l2"), normed)?;
        let a2 = self.tape.elu(h2);
        let a2 = self.tape.dropout(a2, 0.0, None)?;
        self.linear(&format!("{prefix}.l3"), a2)
    }

    /// One GRU step through `num_layer` stacked cells. `hs` holds one hidden
    /// state per layer and is replaced with the new states; returns the top
    /// layer's new state.
    pub fn gru_step(&mut self, prefix: &str, x: Value, hs: &mut [Value]) -> Result<Value> {
        let mut input = x;
        for (l, h) in hs.iter_mut().enumerate() {
            let p = format!("{prefix}.l{l}");
            let gate = |ctx: &mut Self, name: &str, inp: Value, hid: Value| -> Result<Value> {
                let xi = ctx.linear(&format!("{p}.x{name}"), inp)?;
                let hw = ctx.bound.get(&format!("{p}.h{name}.w"));
                let hh = ctx.tape.matmul(hid, hw)?;
                ctx.tape.add(xi, hh)
            };
            let r_pre = gate(self, "r", input, *h)?;
            let r = self.tape.sigmoid(r_pre);
            let z_pre = gate(self, "z", input, *h)?;
            let z = self.tape.sigmoid(z_pre);
            let rh = self.tape.mul(r, *h)?;
            let n_pre = gate(self, "n", input, rh)?;
            let n = self.tape.tanh(n_pre);
            // h' = (1 - z) * n + z * h
            let zn = self.tape.mul(z, n)?;
            let zh = self.tape.mul(z, *h)?;
            let n_minus = self.tape.sub(n, zn)?;
            let h_new = self.tape.add(n_minus, zh)?;
            *h = h_new;
            input = h_new;
        }
        Ok(*hs.last().expect("at least one GRU layer"))
    }

    /// One message pass over the complete directed graph: node features ->
    /// edge messages (f_e) -> mean aggregation of incoming messages ->
    /// node update (f_o). Returns per-node outputs [n_nodes, num_hid].
    pub fn gnn_pass(
        &mut self,
        prefix: &str,
        node_input: Value,
        node_flags: Value,
        edge_flags: Value,
        edge_src: Rc<Vec<usize>>,
        edge_dst: Rc<Vec<usize>>,
    ) -> Result<Value> {
        let n_nodes = self.tape.value(node_input).rows();
        let src_feats = self.tape.gather_rows(node_input, edge_src)?;
        let dst_feats = self.tape.gather_rows(node_input, edge_dst.clone())?;
        let edge_in = self.tape.concat_cols(&[src_feats, dst_feats, edge_flags])?;
        let messages = self.mlp_block_instance_norm(&format!("{prefix}.fe"), edge_in)?;
        let aggregated = self.tape.group_mean_rows(messages, edge_dst, n_nodes)?;
        let node_in = self.tape.concat_cols(&[aggregated, node_flags])?;
        self.mlp_block_instance_norm(&format!("{prefix}.fo"), node_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::models::params::{BoundParams, ModelState};
    use crate::models::{Arch, ModelSpec};
    use crate::types::seeded_rng;

    #[test]
    fn mlp_block_zero_weights_give_zero_output() {
        let spec = ModelSpec::new(Arch::Mlp);
        let mut state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        for (name, t) in state.params.iter_mut() {
            if !name.contains("gamma") {
                *t = Tensor::zeros(t.rows(), t.cols());
            }
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &state.params);
        let x = tape.leaf(Tensor::from_fn(4, 114, |i, j| (i + j) as f64 * 0.01));
        let mut bn = BnMode::Train(&mut state.bn);
        let mut ctx = Ctx {
            tape: &mut tape,
            bound: &bound,
            bn: &mut bn,
        };
        let y = ctx.mlp_block("mlp", x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_block_is_identity_composition_on_identity_weights() {
        // Identity-sized layers with identity weights and frozen batchnorm at
        // (mean 0, var 1) reduce to elu(elu(x)), which is x for x >= 0.
        let spec = ModelSpec {
            arch: Arch::Mlp,
            num_hid: 3,
            rnn_dim: 4,
            num_layer: 1,
            use_ball_velocity_input: true,
        };
        let mut params = std::collections::BTreeMap::new();
        let eye = Tensor::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        params.insert("m.l1.w".into(), eye.clone());
        params.insert("m.l1.b".into(), Tensor::zeros(1, 3));
        params.insert("m.bn.gamma".into(), Tensor::from_vec(1, 3, vec![1.0; 3]).unwrap());
        params.insert("m.bn.beta".into(), Tensor::zeros(1, 3));
        params.insert("m.l2.w".into(), eye.clone());
        params.insert("m.l2.b".into(), Tensor::zeros(1, 3));
        params.insert("m.l3.w".into(), eye);
        params.insert("m.l3.b".into(), Tensor::zeros(1, 3));
        let mut bn = std::collections::BTreeMap::new();
        bn.insert("m.bn".into(), crate::autodiff::BnStats::new(3));
        let _ = spec;

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let x = tape.leaf(Tensor::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.5));
        let mut mode = BnMode::Eval(&bn);
        let mut ctx = Ctx {
            tape: &mut tape,
            bound: &bound,
            bn: &mut mode,
        };
        let y = ctx.mlp_block("m", x).unwrap();
        // batchnorm eval divides by sqrt(1 + eps); undo it for comparison.
        let shrink = 1.0 / (1.0_f64 + crate::autodiff::BN_EPS).sqrt();
        for i in 0..2 {
            for j in 0..3 {
                let xin = tape.value(x).get(i, j) * shrink;
                assert!((tape.value(y).get(i, j) - xin).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_update_gate_saturated_keeps_state() {
        // Bias the update gate z to +inf so h' = h.
        let spec = ModelSpec {
            arch: Arch::Rnn,
            num_hid: 2,
            rnn_dim: 3,
            num_layer: 1,
            use_ball_velocity_input: true,
        };
        let mut state = ModelState::init(&spec, &mut seeded_rng(1)).unwrap();
        state
            .params
            .insert("gru.l0.xz.b".into(), Tensor::from_vec(1, 3, vec![1e9; 3]).unwrap());
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &state.params);
        let x = tape.leaf(Tensor::from_fn(2, 114 + 2 + 44, |_, j| (j as f64).sin()));
        let h0 = tape.leaf(Tensor::from_fn(2, 3, |i, j| (i + j) as f64 * 0.1));
        let mut mode = BnMode::Eval(&state.bn);
        let mut ctx = Ctx {
            tape: &mut tape,
            bound: &bound,
            bn: &mut mode,
        };
        let mut hs = vec![h0];
        let h1 = ctx.gru_step("gru", x, &mut hs).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((tape.value(h1).get(i, j) - tape.value(h0).get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gru_zero_weights_halve_state() {
        // All-zero weights and biases: r = z = 0.5, n = 0, so h' = h / 2.
        let spec = ModelSpec {
            arch: Arch::Rnn,
            num_hid: 2,
            rnn_dim: 3,
            num_layer: 1,
            use_ball_velocity_input: true,
        };
        let mut state = ModelState::init(&spec, &mut seeded_rng(1)).unwrap();
        for (name, t) in state.params.iter_mut() {
            if name.starts_with("gru") {
                *t = Tensor::zeros(t.rows(), t.cols());
            }
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &state.params);
        let x = tape.leaf(Tensor::from_fn(1, 160, |_, j| (j as f64).cos()));
        let h0 = tape.leaf(Tensor::from_vec(1, 3, vec![0.4, -0.8, 1.2]).unwrap());
        let mut mode = BnMode::Eval(&state.bn);
        let mut ctx = Ctx {
            tape: &mut tape,
            bound: &bound,
            bn: &mut mode,
        };
        let mut hs = vec![h0];
        let h1 = ctx.gru_step("gru", x, &mut hs).unwrap();
        for j in 0..3 {
            assert!((tape.value(h1).get(0, j) - tape.value(h0).get(0, j) / 2.0).abs() < 1e-12);
        }
    }
}
