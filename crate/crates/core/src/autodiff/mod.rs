//! Dense-matrix reverse-mode automatic differentiation, initialization,
//! and the Adam optimizer. Sized for hidden dimensions up to ~64.

mod adam;
mod init;
mod tape;
mod tensor;

pub use adam::{OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use init::xavier_init;
pub use tape::{sigmoid, softplus, BnStats, Gradients, Tape, Value, BN_EPS, BN_MOMENTUM};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[cfg(test)]
mod grad_tests {
    //! Finite-difference checks for every primitive: central differences at
    //! h = 1e-5 against the tape's backward pass on random inputs.

    use std::rc::Rc;

    use rand::Rng;

    use super::*;
    use crate::types::seeded_rng;

    const H: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;
    const ABS_FLOOR: f64 = 1e-6;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    /// Checks d(scalar f)/d(inputs) against central differences for every
    /// entry of every input tensor.
    fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Value]) -> Value) {
        let mut tape = Tape::new();
        let vals: Vec<Value> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vals);
        assert_eq!(tape.value(out).shape(), (1, 1), "loss must be scalar");
        let grads = tape.backward(out).unwrap();

        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vals[which]);
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[idx] += H;
                let mut t_plus = Tape::new();
                let v_plus: Vec<Value> = plus.iter().map(|t| t_plus.leaf(t.clone())).collect();
                let out_plus = f(&mut t_plus, &v_plus);
                let f_plus = t_plus.value(out_plus).item();

                let mut minus = inputs.to_vec();
                minus[which].data_mut()[idx] -= H;
                let mut t_minus = Tape::new();
                let v_minus: Vec<Value> = minus.iter().map(|t| t_minus.leaf(t.clone())).collect();
                let out_minus = f(&mut t_minus, &v_minus);
                let f_minus = t_minus.value(out_minus).item();

                let numeric = (f_plus - f_minus) / (2.0 * H);
                let got = analytic.map_or(0.0, |g| g.data()[idx]);
                let denom = numeric.abs().max(got.abs()).max(ABS_FLOOR);
                assert!(
                    (numeric - got).abs() / denom < REL_TOL,
                    "input {which} entry {idx}: numeric {numeric} vs analytic {got}"
                );
            }
        }
    }

    #[test]
    fn matmul_grad() {
        let mut rng = seeded_rng(11);
        let a = rand_tensor(3, 4, &mut rng);
        let b = rand_tensor(4, 2, &mut rng);
        check(&[a, b], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            t.mean_all(c)
        });
    }

    #[test]
    fn add_sub_mul_div_grad() {
        let mut rng = seeded_rng(12);
        let a = rand_tensor(3, 3, &mut rng);
        let b = rand_tensor(3, 3, &mut rng).map(|x| x + 2.5); // keep divisors away from 0
        check(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            let q = t.div(m, v[1]).unwrap();
            t.mean_all(q)
        });
    }

    #[test]
    fn add_row_broadcast_grad() {
        let mut rng = seeded_rng(13);
        let a = rand_tensor(4, 3, &mut rng);
        let row = rand_tensor(1, 3, &mut rng);
        check(&[a, row], |t, v| {
            let y = t.add_row(v[0], v[1]).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.mean_all(y2)
        });
    }

    #[test]
    fn activations_grad() {
        let mut rng = seeded_rng(14);
        let a = rand_tensor(3, 4, &mut rng);
        check(&[a.clone()], |t, v| {
            let e = t.elu(v[0]);
            t.mean_all(e)
        });
        check(&[a.clone()], |t, v| {
            let s = t.softplus(v[0]);
            t.mean_all(s)
        });
        check(&[a.clone()], |t, v| {
            let s = t.sigmoid(v[0]);
            t.mean_all(s)
        });
        check(&[a.clone()], |t, v| {
            let s = t.tanh(v[0]);
            t.mean_all(s)
        });
        check(&[a.clone()], |t, v| {
            let s = t.exp(v[0]);
            t.mean_all(s)
        });
        let positive = a.map(|x| x.abs() + 0.5);
        check(&[positive], |t, v| {
            let s = t.ln(v[0]);
            t.mean_all(s)
        });
    }

    #[test]
    fn concat_slice_grad() {
        let mut rng = seeded_rng(15);
        let a = rand_tensor(3, 2, &mut rng);
        let b = rand_tensor(3, 3, &mut rng);
        check(&[a, b], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]).unwrap();
            let s = t.slice_cols(c, 1, 4).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.mean_all(sq)
        });
    }

    #[test]
    fn gather_group_broadcast_grad() {
        let mut rng = seeded_rng(16);
        let a = rand_tensor(4, 3, &mut rng);
        let row = rand_tensor(1, 3, &mut rng);
        let idx = Rc::new(vec![0usize, 2, 2, 3, 1]);
        let groups = Rc::new(vec![0usize, 1, 0, 1, 0]);
        check(&[a, row], |t, v| {
            let g = t.gather_rows(v[0], idx.clone()).unwrap();
            let m = t.group_mean_rows(g, groups.clone(), 2).unwrap();
            let b = t.broadcast_rows(v[1], 2).unwrap();
            let s = t.mul(m, b).unwrap();
            let r = t.mean_rows(s);
            t.mean_all(r)
        });
    }

    #[test]
    fn concat_rows_reshape_grad() {
        let mut rng = seeded_rng(22);
        let a = rand_tensor(2, 4, &mut rng);
        let b = rand_tensor(3, 4, &mut rng);
        check(&[a, b], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]]).unwrap();
            let r = t.reshape(c, 4, 5).unwrap();
            let sq = t.mul(r, r).unwrap();
            t.mean_all(sq)
        });
    }

    #[test]
    fn mse_grad() {
        let mut rng = seeded_rng(17);
        let a = rand_tensor(4, 5, &mut rng);
        let b = rand_tensor(4, 5, &mut rng);
        check(&[a, b], |t, v| t.mse(v[0], v[1]).unwrap());
    }

    #[test]
    fn batchnorm_train_grad() {
        let mut rng = seeded_rng(18);
        let x = rand_tensor(6, 3, &mut rng);
        let gamma = rand_tensor(1, 3, &mut rng).map(|v| v + 1.5);
        let beta = rand_tensor(1, 3, &mut rng);
        check(&[x, gamma, beta], |t, v| {
            let mut stats = BnStats::new(3);
            let y = t.batchnorm_train(v[0], v[1], v[2], &mut stats).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.mean_all(y2)
        });
    }

    #[test]
    fn batchnorm_eval_grad() {
        let mut rng = seeded_rng(19);
        let x = rand_tensor(5, 3, &mut rng);
        let gamma = rand_tensor(1, 3, &mut rng).map(|v| v + 1.5);
        let beta = rand_tensor(1, 3, &mut rng);
        let stats = BnStats {
            running_mean: vec![0.2, -0.4, 0.1],
            running_var: vec![1.3, 0.8, 2.0],
        };
        check(&[x, gamma, beta], |t, v| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], &stats).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.mean_all(y2)
        });
    }

    #[test]
    fn scale_add_scalar_mean_rows_grad() {
        let mut rng = seeded_rng(20);
        let a = rand_tensor(4, 3, &mut rng);
        check(&[a], |t, v| {
            let s = t.scale(v[0], -2.5);
            let s = t.add_scalar(s, 0.75);
            let r = t.mean_rows(s);
            let sq = t.mul(r, r).unwrap();
            t.mean_all(sq)
        });
    }

    #[test]
    fn dropout_identity_at_zero() {
        let mut rng = seeded_rng(21);
        let a = rand_tensor(3, 3, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(a.clone());
        let y = tape.dropout(v, 0.0, None).unwrap();
        assert_eq!(tape.value(y), &a);
        check(&[a], |t, v| {
            let y = t.dropout(v[0], 0.0, None).unwrap();
            t.mean_all(y)
        });
    }
}
