//! Convolution, activation and pooling kernels with explicit backward passes.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor3;

/// 3×3 convolution with zero padding 1 and unit stride.
///
/// Weight layout: `weight[((ky * 3 + kx) * cin + ci) * cout + co]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![0.0; 9 * cin * cout],
            bias: vec![0.0; cout],
        }
    }

    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        debug_assert_eq!(input.c, self.cin);
        let (h, w) = (input.h, input.w);
        let mut out = Tensor3::zeros(h, w, self.cout);
        for y in 0..h {
            for x in 0..w {
                let o = out.pixel_mut(y * w + x);
                o.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let inp = input.pixel(iy as usize * w + ix as usize);
                        let base = (ky * 3 + kx) * self.cin;
                        for (ci, &v) in inp.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let row =
                                &self.weight[(base + ci) * self.cout..(base + ci + 1) * self.cout];
                            for (oc, wv) in o.iter_mut().zip(row) {
                                *oc += v * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        input: &Tensor3,
        dout: &Tensor3,
        grad: &mut Conv3x3,
        want_input: bool,
    ) -> Option<Tensor3> {
        let (h, w) = (input.h, input.w);
        let mut din = want_input.then(|| Tensor3::zeros(h, w, self.cin));
        for y in 0..h {
            for x in 0..w {
                let d = dout.pixel(y * w + x);
                if d.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for (gb, dv) in grad.bias.iter_mut().zip(d) {
                    *gb += dv;
                }
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let p = iy as usize * w + ix as usize;
                        let inp = input.pixel(p);
                        let base = (ky * 3 + kx) * self.cin;
                        for ci in 0..self.cin {
                            let r = (base + ci) * self.cout..(base + ci + 1) * self.cout;
                            let v = inp[ci];
                            if v != 0.0 {
                                for (gw, dv) in grad.weight[r.clone()].iter_mut().zip(d) {
                                    *gw += v * dv;
                                }
                            }
                            if let Some(din) = din.as_mut() {
                                let s: f64 = self.weight[r].iter().zip(d).map(|(a, b)| a * b).sum();
                                din.data[p * self.cin + ci] += s;
                            }
                        }
                    }
                }
            }
        }
        din
    }
}

pub fn leaky_relu(x: &Tensor3, slope: f64) -> Tensor3 {
    Tensor3 {
        h: x.h,
        w: x.w,
        c: x.c,
        data: x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect(),
    }
}

/// Gradient through [`leaky_relu`] given the pre-activation.
pub fn leaky_relu_backward(pre: &Tensor3, dout: &Tensor3, slope: f64) -> Tensor3 {
    Tensor3 {
        h: pre.h,
        w: pre.w,
        c: pre.c,
        data: pre
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&p, &d)| if p > 0.0 { d } else { slope * d })
            .collect(),
    }
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor3) -> Tensor3 {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor3::zeros(h, w, x.c);
    for y in 0..h {
        for xx in 0..w {
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = (2 * y + dy) * x.w + 2 * xx + dx;
                    let dst = y * w + xx;
                    for c in 0..x.c {
                        out.data[dst * x.c + c] += 0.25 * x.data[src * x.c + c];
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dout: &Tensor3, in_h: usize, in_w: usize) -> Tensor3 {
    let mut din = Tensor3::zeros(in_h, in_w, dout.c);
    for y in 0..dout.h {
        for x in 0..dout.w {
            let src = y * dout.w + x;
            for dy in 0..2 {
                for dx in 0..2 {
                    let dst = (2 * y + dy) * in_w + 2 * x + dx;
                    for c in 0..dout.c {
                        din.data[dst * dout.c + c] = 0.25 * dout.data[src * dout.c + c];
                    }
                }
            }
        }
    }
    din
}
