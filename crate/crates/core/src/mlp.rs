//! The shared decoder: a small fully connected network mapping an
//! interpolated grid feature to the K basis weights. Hidden layers use
//! ReLU; the output layer is linear so the weights are raw signed
//! distances in meters.
//!
//! Parameters live in one flat buffer (per layer: row-major weights, then
//! biases) so the optimizer and the checkpoint writer can treat the whole
//! decoder as a single slice.

use rand::Rng;

#[derive(Debug, Clone)]
pub struct Mlp {
    /// Layer widths, input first: `[D, hidden, ..., K]`.
    dims: Vec<usize>,
    pub params: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Per layer: (weight offset, bias offset) into the flat buffers.
    offsets: Vec<(usize, usize)>,
}

/// Forward-pass record sufficient for an exact reverse pass. Reused across
/// queries to keep the hot path allocation-free.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    input: Vec<f64>,
    /// Pre-activations per layer; the last entry is the linear output.
    pre: Vec<Vec<f64>>,
    /// Post-activations per layer (ReLU of `pre`, identity on the output).
    act: Vec<Vec<f64>>,
    /// Scratch for the reverse pass.
    dz: Vec<Vec<f64>>,
}

impl MlpTape {
    fn ensure_shape(&mut self, dims: &[usize]) {
        let layers = dims.len() - 1;
        self.input.resize(dims[0], 0.0);
        let shape_matches = self.pre.len() == layers
            && self.pre.iter().zip(&dims[1..]).all(|(v, &d)| v.len() == d);
        if !shape_matches {
            self.pre = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
            self.act = self.pre.clone();
            self.dz = self.pre.clone();
        }
    }

    /// The decoded weight vector from the most recent forward pass.
    #[inline]
    pub fn output(&self) -> &[f64] {
        self.act.last().expect("tape used before a forward pass")
    }

    /// Pre-activations of hidden layer `l` (for kink checks in tests).
    pub fn hidden_pre(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }
}

impl Mlp {
    /// Builds a decoder with `hidden_layers` hidden layers of width
    /// `hidden_width`. Weights are uniform in +-sqrt(6/(fan_in+fan_out)),
    /// biases zero.
    pub fn new(
        input_dim: usize,
        hidden_layers: usize,
        hidden_width: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Mlp {
        let mut dims = Vec::with_capacity(hidden_layers + 2);
        dims.push(input_dim);
        dims.extend(std::iter::repeat(hidden_width).take(hidden_layers));
        dims.push(output_dim);
        let mut mlp = Mlp::zeroed(dims);
        for l in 0..mlp.layer_count() {
            let (fan_in, fan_out) = (mlp.dims[l], mlp.dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w_off, _) = mlp.offsets[l];
            for w in &mut mlp.params[w_off..w_off + fan_out * fan_in] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        mlp
    }

    /// All-zero parameters with the given layer widths (input first).
    pub fn zeroed(dims: Vec<usize>) -> Mlp {
        assert!(dims.len() >= 2, "decoder needs at least input and output");
        let mut offsets = Vec::with_capacity(dims.len() - 1);
        let mut total = 0;
        for l in 0..dims.len() - 1 {
            let w_off = total;
            total += dims[l + 1] * dims[l];
            let b_off = total;
            total += dims[l + 1];
            offsets.push((w_off, b_off));
        }
        Mlp {
            dims,
            params: vec![0.0; total],
            grad: vec![0.0; total],
            adam_m: vec![0.0; total],
            adam_v: vec![0.0; total],
            offsets,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        self.offsets[l]
    }

    /// Runs the network on `input`, recording everything needed for the
    /// reverse pass. The output lives in `tape.output()`.
    pub fn forward(&self, input: &[f64], tape: &mut MlpTape) {
        debug_assert_eq!(input.len(), self.dims[0]);
        tape.ensure_shape(&self.dims);
        tape.input.copy_from_slice(input);
        let layers = self.layer_count();
        for l in 0..layers {
            let (in_d, out_d) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = self.offsets[l];
            let weights = &self.params[w_off..w_off + out_d * in_d];
            let biases = &self.params[b_off..b_off + out_d];
            // split so act[l-1] can be read while pre[l]/act[l] are written
            let (prev_acts, rest) = tape.act.split_at_mut(l);
            let prev: &[f64] = if l == 0 { &tape.input } else { &prev_acts[l - 1] };
            let pre = &mut tape.pre[l];
            for o in 0..out_d {
                let row = &weights[o * in_d..(o + 1) * in_d];
                pre[o] = biases[o] + dot(row, prev);
            }
            let act = &mut rest[0];
            if l + 1 == layers {
                act.copy_from_slice(pre);
            } else {
                for (a, &z) in act.iter_mut().zip(pre.iter()) {
                    *a = z.max(0.0);
                }
            }
        }
    }

    /// Exact reverse pass. `upstream` is the loss gradient on the output;
    /// parameter gradients are added into `grad_buf` (same layout as
    /// `params`) and the gradient on the input feature into `d_input`.
    pub fn backward(
        &self,
        tape: &mut MlpTape,
        upstream: &[f64],
        grad_buf: &mut [f64],
        d_input: &mut [f64],
    ) {
        backward_impl(
            &self.dims,
            &self.offsets,
            &self.params,
            tape,
            upstream,
            grad_buf,
            d_input,
        );
    }

    /// Reverse pass accumulating into the decoder's own gradient buffer.
    pub fn backward_accumulate(
        &mut self,
        tape: &mut MlpTape,
        upstream: &[f64],
        d_input: &mut [f64],
    ) {
        backward_impl(
            &self.dims,
            &self.offsets,
            &self.params,
            tape,
            upstream,
            &mut self.grad,
            d_input,
        );
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Dot product with eight independent accumulator lanes so the reduction
/// vectorizes; the summation order is fixed, keeping results reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a[..chunks * 8]
        .chunks_exact(8)
        .zip(b[..chunks * 8].chunks_exact(8))
    {
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for i in chunks * 8..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// dst += s * src, element-wise.
#[inline]
fn axpy(dst: &mut [f64], s: f64, src: &[f64]) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

fn backward_impl(
    dims: &[usize],
    offsets: &[(usize, usize)],
    params: &[f64],
    tape: &mut MlpTape,
    upstream: &[f64],
    grad_buf: &mut [f64],
    d_input: &mut [f64],
) {
    let layers = dims.len() - 1;
    debug_assert_eq!(upstream.len(), dims[layers]);
    debug_assert_eq!(grad_buf.len(), params.len());
    debug_assert_eq!(d_input.len(), dims[0]);
    tape.dz[layers - 1].copy_from_slice(upstream);
    for l in (0..layers).rev() {
        let (in_d, out_d) = (dims[l], dims[l + 1]);
        let (w_off, b_off) = offsets[l];
        let weights = &params[w_off..w_off + out_d * in_d];
        let prev: &[f64] = if l == 0 { &tape.input } else { &tape.act[l - 1] };
        {
            let dz = &tape.dz[l];
            let (gw, gb) = {
                let (head, tail) = grad_buf.split_at_mut(b_off);
                (&mut head[w_off..], &mut tail[..out_d])
            };
            for o in 0..out_d {
                let d = dz[o];
                if d != 0.0 {
                    axpy(&mut gw[o * in_d..(o + 1) * in_d], d, prev);
                }
                gb[o] += d;
            }
        }
        if l == 0 {
            let dz = &tape.dz[0];
            d_input.fill(0.0);
            for o in 0..out_d {
                let d = dz[o];
                if d != 0.0 {
                    axpy(d_input, d, &weights[o * in_d..(o + 1) * in_d]);
                }
            }
        } else {
            let (lower, upper) = tape.dz.split_at_mut(l);
            let dz = &upper[0];
            let dprev = &mut lower[l - 1];
            dprev.fill(0.0);
            for o in 0..out_d {
                let d = dz[o];
                if d != 0.0 {
                    axpy(dprev, d, &weights[o * in_d..(o + 1) * in_d]);
                }
            }
            // ReLU gate of the previous layer
            let pre_prev = &tape.pre[l - 1];
            for (g, &z) in dprev.iter_mut().zip(pre_prev.iter()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }
}
