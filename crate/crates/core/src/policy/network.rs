//! Recurrent encoder/decoder with hand-written backpropagation through time.
//!
//! Encoder: three stacked LSTM layers of width `h`, then two fully connected
//! rectifier layers. Decoder: one fully connected layer whose output is split
//! into `B` logit heads of width `U + 1` (the last option is "idle").

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LSTM_LAYERS: usize = 3;
const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_ris: usize,
    pub num_users: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    lstm: [Dense; LSTM_LAYERS],
    fc1: Dense,
    fc2: Dense,
    out: Dense,
    total: usize,
}

impl Architecture {
    pub fn head_width(&self) -> usize {
        self.num_users + 1
    }

    pub fn output_dim(&self) -> usize {
        self.num_ris * self.head_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.num_ris == 0 || self.num_users == 0 {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let h = self.hidden;
        let mut offset = 0;
        let mut dense = |rows: usize, cols: usize| {
            let d = Dense {
                w: offset,
                b: offset + rows * cols,
                rows,
                cols,
            };
            offset += rows * cols + rows;
            d
        };
        let lstm = [
            dense(4 * h, self.input_dim + h),
            dense(4 * h, 2 * h),
            dense(4 * h, 2 * h),
        ];
        let fc1 = dense(h, h);
        let fc2 = dense(h, h);
        let out = dense(self.output_dim(), h);
        Layout {
            lstm,
            fc1,
            fc2,
            out,
            total: offset,
        }
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Flat parameter vector of the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    arch: Architecture,
    theta: Vec<f64>,
}

/// Hidden and cell state of the three recurrent layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Carry {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl Carry {
    pub fn zeros(arch: &Architecture) -> Self {
        Carry {
            h: vec![vec![0.0; arch.hidden]; LSTM_LAYERS],
            c: vec![vec![0.0; arch.hidden]; LSTM_LAYERS],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// out += W x for a row-major `rows x cols` block.
fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// dx += W^T dy.
fn matvec_t_add(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for (r, &g) in dy.iter().enumerate().take(rows) {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
}

/// grad += dy x^T.
fn outer_add(grad: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut grad[r * cols..(r + 1) * cols];
        for (d, a) in row.iter_mut().zip(x) {
            *d += g * a;
        }
    }
}

#[derive(Debug, Clone)]
struct LstmStep {
    /// [x; h_prev]
    input: Vec<f64>,
    /// activated gates, each of width h: i, f, g, o
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StepCache {
    lstm: Vec<LstmStep>,
    top: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

/// Activations of a forward pass kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    steps: Vec<StepCache>,
    /// Logits per step, `B * (U + 1)` each.
    pub logits: Vec<Vec<f64>>,
}

impl PolicyParams {
    /// LSTM forget-gate biases start at 1; every other weight is uniform in
    /// [-0.08, 0.08] and the remaining biases are 0.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut theta = vec![0.0; layout.total];
        let h = arch.hidden;
        let mut fill = |d: &Dense| {
            for v in &mut theta[d.w..d.w + d.rows * d.cols] {
                *v = rng.random_range(-INIT_SCALE..INIT_SCALE);
            }
        };
        for d in layout.lstm.iter().chain([&layout.fc1, &layout.fc2, &layout.out]) {
            fill(d);
        }
        for d in &layout.lstm {
            for v in &mut theta[d.b + h..d.b + 2 * h] {
                *v = 1.0;
            }
        }
        Ok(PolicyParams { arch, theta })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(PolicyParams {
            arch,
            theta: vec![0.0; arch.param_count()],
        })
    }

    pub fn from_flat(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::dims(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(PolicyParams { arch, theta })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn block(&self, d: &Dense) -> (&[f64], &[f64]) {
        (
            &self.theta[d.w..d.w + d.rows * d.cols],
            &self.theta[d.b..d.b + d.rows],
        )
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::dims(format!(
                "feature vector has {} entries, network expects {}",
                x.len(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    fn step_inner(&self, layout: &Layout, x: &[f64], carry: &mut Carry, mut cache: Option<&mut Vec<StepCache>>) -> Vec<f64> {
        let h = self.arch.hidden;
        let mut below = x.to_vec();
        let mut lstm_cache = Vec::new();
        for (l, d) in layout.lstm.iter().enumerate() {
            let mut input = below.clone();
            input.extend_from_slice(&carry.h[l]);
            let (w, b) = self.block(d);
            let mut z = b.to_vec();
            matvec_add(w, d.rows, d.cols, &input, &mut z);
            let mut gates = vec![0.0; 4 * h];
            for k in 0..h {
                gates[k] = sigmoid(z[k]);
                gates[h + k] = sigmoid(z[h + k]);
                gates[2 * h + k] = z[2 * h + k].tanh();
                gates[3 * h + k] = sigmoid(z[3 * h + k]);
            }
            let c_prev = std::mem::take(&mut carry.c[l]);
            let mut c = vec![0.0; h];
            let mut tanh_c = vec![0.0; h];
            let mut h_new = vec![0.0; h];
            for k in 0..h {
                c[k] = gates[h + k] * c_prev[k] + gates[k] * gates[2 * h + k];
                tanh_c[k] = c[k].tanh();
                h_new[k] = gates[3 * h + k] * tanh_c[k];
            }
            if cache.is_some() {
                lstm_cache.push(LstmStep {
                    input,
                    gates,
                    c_prev,
                    tanh_c,
                });
            }
            carry.c[l] = c;
            carry.h[l] = h_new.clone();
            below = h_new;
        }
        let top = below;
        let dense_relu = |d: &Dense, x: &[f64]| {
            let (w, b) = self.block(d);
            let mut y = b.to_vec();
            matvec_add(w, d.rows, d.cols, x, &mut y);
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            y
        };
        let a1 = dense_relu(&layout.fc1, &top);
        let a2 = dense_relu(&layout.fc2, &a1);
        let (w, b) = self.block(&layout.out);
        let mut logits = b.to_vec();
        matvec_add(w, layout.out.rows, layout.out.cols, &a2, &mut logits);
        if let Some(c) = cache.as_deref_mut() {
            c.push(StepCache {
                lstm: lstm_cache,
                top,
                a1,
                a2,
            });
        }
        logits
    }

    /// One slot of inference; returns the concatenated head logits.
    pub fn step(&self, x: &[f64], carry: &mut Carry) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.step_inner(&self.arch.layout(), x, carry, None))
    }

    /// Runs a sequence from a zero carry, keeping activations for [`Self::backward`].
    pub fn forward_cached(&self, xs: &[Vec<f64>]) -> Result<SequenceCache> {
        self.forward_cached_from(xs, &mut Carry::zeros(&self.arch))
    }

    /// Like [`Self::forward_cached`] but starting from, and advancing, `carry`.
    /// The backward pass treats the starting carry as a constant.
    pub fn forward_cached_from(&self, xs: &[Vec<f64>], carry: &mut Carry) -> Result<SequenceCache> {
        for x in xs {
            self.check_input(x)?;
        }
        let layout = self.arch.layout();
        let mut steps = Vec::with_capacity(xs.len());
        let logits = xs
            .iter()
            .map(|x| self.step_inner(&layout, x, carry, Some(&mut steps)))
            .collect();
        Ok(SequenceCache { steps, logits })
    }

    /// Gradient of `sum_t <dlogits_t, logits_t>` with respect to the parameters.
    pub fn backward(&self, cache: &SequenceCache, dlogits: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.arch.layout().total];
        self.backward_into(cache, dlogits, &mut grad)?;
        Ok(grad)
    }

    /// Adds the gradient of [`Self::backward`] into `grad`.
    pub fn backward_into(&self, cache: &SequenceCache, dlogits: &[Vec<f64>], grad: &mut [f64]) -> Result<()> {
        if dlogits.len() != cache.steps.len() {
            return Err(Error::dims(format!(
                "{} logit gradients for a {}-step sequence",
                dlogits.len(),
                cache.steps.len()
            )));
        }
        let layout = self.arch.layout();
        let h = self.arch.hidden;
        let n = cache.steps.len();
        if grad.len() != layout.total {
            return Err(Error::dims(format!("gradient buffer holds {}, need {}", grad.len(), layout.total)));
        }

        // decoder and fully connected encoder layers, per step
        let mut d_top: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (st, dl) in cache.steps.iter().zip(dlogits) {
            if dl.len() != self.arch.output_dim() {
                return Err(Error::dims("logit gradient width does not match the heads"));
            }
            let out = &layout.out;
            outer_add(&mut grad[out.w..out.w + out.rows * out.cols], out.cols, dl, &st.a2);
            add_into(&mut grad[out.b..out.b + out.rows], dl);
            let mut da2 = vec![0.0; h];
            matvec_t_add(self.block(out).0, out.rows, out.cols, dl, &mut da2);

            let dz2: Vec<f64> = da2.iter().zip(&st.a2).map(|(g, a)| if *a > 0.0 { *g } else { 0.0 }).collect();
            let fc2 = &layout.fc2;
            outer_add(&mut grad[fc2.w..fc2.w + fc2.rows * fc2.cols], fc2.cols, &dz2, &st.a1);
            add_into(&mut grad[fc2.b..fc2.b + fc2.rows], &dz2);
            let mut da1 = vec![0.0; h];
            matvec_t_add(self.block(fc2).0, fc2.rows, fc2.cols, &dz2, &mut da1);

            let dz1: Vec<f64> = da1.iter().zip(&st.a1).map(|(g, a)| if *a > 0.0 { *g } else { 0.0 }).collect();
            let fc1 = &layout.fc1;
            outer_add(&mut grad[fc1.w..fc1.w + fc1.rows * fc1.cols], fc1.cols, &dz1, &st.top);
            add_into(&mut grad[fc1.b..fc1.b + fc1.rows], &dz1);
            let mut dtop = vec![0.0; h];
            matvec_t_add(self.block(fc1).0, fc1.rows, fc1.cols, &dz1, &mut dtop);
            d_top.push(dtop);
        }

        // recurrent layers, top to bottom, each backwards in time
        let mut d_above = d_top;
        for l in (0..LSTM_LAYERS).rev() {
            let d = &layout.lstm[l];
            let in_dim = d.cols - h;
            let w = self.block(d).0;
            let mut d_below = vec![vec![0.0; in_dim]; n];
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            for t in (0..n).rev() {
                let st = &cache.steps[t].lstm[l];
                let mut dz = vec![0.0; 4 * h];
                for k in 0..h {
                    let (i, f, g, o) = (st.gates[k], st.gates[h + k], st.gates[2 * h + k], st.gates[3 * h + k]);
                    let dh = d_above[t][k] + dh_next[k];
                    let tc = st.tanh_c[k];
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                    dz[k] = dc * g * i * (1.0 - i);
                    dz[h + k] = dc * st.c_prev[k] * f * (1.0 - f);
                    dz[2 * h + k] = dc * i * (1.0 - g * g);
                    dz[3 * h + k] = dh * tc * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
                outer_add(&mut grad[d.w..d.w + d.rows * d.cols], d.cols, &dz, &st.input);
                add_into(&mut grad[d.b..d.b + d.rows], &dz);
                let mut dinput = vec![0.0; d.cols];
                matvec_t_add(w, d.rows, d.cols, &dz, &mut dinput);
                d_below[t].copy_from_slice(&dinput[..in_dim]);
                dh_next.copy_from_slice(&dinput[in_dim..]);
            }
            d_above = d_below;
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};

    fn arch() -> Architecture {
        Architecture {
            input_dim: 5,
            hidden: 6,
            num_ris: 2,
            num_users: 3,
        }
    }

    #[test]
    fn parameter_count_matches_layout() {
        let a = arch();
        let h = 6;
        let expect = 4 * h * (5 + h) + 4 * h + 2 * (4 * h * 2 * h + 4 * h) + 2 * (h * h + h) + 8 * h + 8;
        assert_eq!(a.param_count(), expect);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let a = arch();
        let p = PolicyParams::init(a, &mut stream(1, StreamId::Scheduler)).unwrap();
        let layout = a.layout();
        for d in &layout.lstm {
            assert!(p.theta[d.b + 6..d.b + 12].iter().all(|&v| v == 1.0));
            assert!(p.theta[d.b..d.b + 6].iter().all(|&v| v == 0.0));
        }
        assert!(p.theta.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn inference_matches_cached_forward() {
        let a = arch();
        let p = PolicyParams::init(a, &mut stream(2, StreamId::Scheduler)).unwrap();
        let mut rng = stream(3, StreamId::Scheduler);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let cache = p.forward_cached(&xs).unwrap();
        let mut carry = Carry::zeros(&a);
        for (x, l) in xs.iter().zip(&cache.logits) {
            assert_eq!(&p.step(x, &mut carry).unwrap(), l);
        }
        assert!(p.step(&[0.0; 4], &mut carry).is_err());
    }

    #[test]
    fn from_flat_checks_length() {
        let a = arch();
        assert!(PolicyParams::from_flat(a, vec![0.0; 3]).is_err());
        assert!(PolicyParams::from_flat(a, vec![0.0; a.param_count()]).is_ok());
    }
}
