//! Dense, 3x3 convolution and 2x2 max-pool kernels over flat `f64` buffers.
//! Feature maps are channel-major (`C x H x W`).

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// `grad *= (pre > 0)`
pub(crate) fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Fully connected layer, weight stored `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            n_in,
            n_out,
            weight: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        self.weight
            .chunks_exact(self.n_in.max(1))
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when
    /// `want_input_grad` is set.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, want_input_grad: bool) -> Option<Vec<f64>> {
        let n_in = self.n_in;
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            axpy(g, x, &mut grad.weight[o * n_in..(o + 1) * n_in]);
        }
        want_input_grad.then(|| {
            let mut dx = vec![0.0; n_in];
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &self.weight[o * n_in..(o + 1) * n_in], &mut dx);
                }
            }
            dx
        })
    }
}

/// 3x3 convolution, stride 1, zero padding 1. Weight stored
/// `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn pad(x: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; ch * ph * pw];
    for c in 0..ch {
        for y in 0..h {
            let src = &x[(c * h + y) * w..(c * h + y + 1) * w];
            let dst = (c * ph + y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

impl Conv3x3 {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Conv3x3 {
            in_ch,
            out_ch,
            weight: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_ch * h * w);
        let padded = pad(x, self.in_ch, h, w);
        let pw = w + 2;
        let ph = h + 2;
        let mut out = vec![0.0; self.out_ch * h * w];
        for oc in 0..self.out_ch {
            let plane = &mut out[oc * h * w..(oc + 1) * h * w];
            plane.fill(self.bias[oc]);
            for ic in 0..self.in_ch {
                let src = &padded[ic * ph * pw..(ic + 1) * ph * pw];
                let kern = &self.weight[(oc * self.in_ch + ic) * 9..(oc * self.in_ch + ic + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = kern[ky * 3 + kx];
                        for y in 0..h {
                            let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            axpy(k, row, &mut plane[y * w..(y + 1) * w]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients; returns `dL/dx` when requested.
    pub fn backward(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        dy: &[f64],
        grad: &mut Conv3x3,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let padded = pad(x, self.in_ch, h, w);
        let pw = w + 2;
        let ph = h + 2;
        let mut dpad = if want_input_grad {
            vec![0.0; self.in_ch * ph * pw]
        } else {
            Vec::new()
        };
        for oc in 0..self.out_ch {
            let g = &dy[oc * h * w..(oc + 1) * h * w];
            grad.bias[oc] += g.iter().sum::<f64>();
            for ic in 0..self.in_ch {
                let src = &padded[ic * ph * pw..(ic + 1) * ph * pw];
                let base = (oc * self.in_ch + ic) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            acc += dot(&g[y * w..(y + 1) * w], row);
                        }
                        grad.weight[base + ky * 3 + kx] += acc;
                        if want_input_grad {
                            let k = self.weight[base + ky * 3 + kx];
                            let dsrc = &mut dpad[ic * ph * pw..(ic + 1) * ph * pw];
                            for y in 0..h {
                                let start = (y + ky) * pw + kx;
                                axpy(k, &g[y * w..(y + 1) * w], &mut dsrc[start..start + w]);
                            }
                        }
                    }
                }
            }
        }
        want_input_grad.then(|| {
            let mut dx = vec![0.0; self.in_ch * h * w];
            for c in 0..self.in_ch {
                for y in 0..h {
                    let s = (c * ph + y + 1) * pw + 1;
                    dx[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(&dpad[s..s + w]);
                }
            }
            dx
        })
    }
}

/// 2x2 max-pool with stride 2. Returns pooled values and, per output, the
/// flat index of the winning input (first maximum on ties).
pub(crate) fn maxpool2(x: &[f64], ch: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut arg = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best_i = (c * h + 2 * y) * w + 2 * xx;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (c * h + 2 * y + dy) * w + 2 * xx + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(dy: &[f64], arg: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &i) in dy.iter().zip(arg) {
        dx[i as usize] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a zero-padded 3x3 convolution.
    fn conv_oracle(c: &Conv3x3, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; c.out_ch * h * w];
        for oc in 0..c.out_ch {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = c.bias[oc];
                    for ic in 0..c.in_ch {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = c.weight[(oc * c.in_ch + ic) * 9 + (ky * 3 + kx) as usize];
                                acc += wv * x[(ic * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(oc * h + y as usize) * w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut c = Conv3x3::zeros(2, 3);
        for (i, v) in c.weight.iter_mut().enumerate() {
            *v = ((i * 7919) % 23) as f64 / 11.0 - 1.0;
        }
        c.bias = vec![0.1, -0.2, 0.3];
        let (h, w) = (5, 6);
        let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect();
        let got = c.forward(&x, h, w);
        let want = conv_oracle(&c, &x, h, w);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_picks_first_max() {
        let x = vec![1.0, 3.0, 3.0, 0.0];
        let (out, arg) = maxpool2(&x, 1, 2, 2);
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![1]);
        assert_eq!(maxpool2_backward(&[2.0], &arg, 4), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_forward_backward() {
        let d = Dense {
            n_in: 3,
            n_out: 2,
            weight: vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0],
            bias: vec![0.5, -0.5],
        };
        let x = [1.0, -1.0, 2.0];
        assert_eq!(d.forward(&x), vec![5.5, -2.0]);
        let mut g = Dense::zeros(3, 2);
        let dx = d.backward(&x, &[1.0, 2.0], &mut g, true).unwrap();
        assert_eq!(dx, vec![-1.0, 3.0, 3.0]);
        assert_eq!(g.bias, vec![1.0, 2.0]);
        assert_eq!(g.weight, vec![1.0, -1.0, 2.0, 2.0, -2.0, 4.0]);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..7).map(|i| i as f64).collect();
        assert_eq!(dot(&a, &a), 91.0);
    }
}
