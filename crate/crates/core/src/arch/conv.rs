//! Single convolutional layer, `v[s,t] = A(z[s,t])` with
//! `z[s,t] = Σ_{l,k} w[l,k]·x[σs + l, τt + k]`.
//!
//! All indices are 0-based: the 1-based `x[σs + l − 1]` form becomes
//! `x[σs + l]` once `s` and `l` both start at 0.
//!
//! Every family is returned as a matrix with one row per output `(s, t)`
//! (row-major over `S×T`) or, for second derivatives, one matrix per output.

use crate::error::{shape_err, Result};
use crate::linalg::Mat;
use crate::net::ActKind;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub kernel: Mat,
    pub strides: (usize, usize),
    pub input: (usize, usize),
    pub activation: ActKind,
}

impl ConvSpec {
    pub fn new(kernel: Mat, strides: (usize, usize), input: (usize, usize), activation: ActKind) -> Result<Self> {
        let cs = ConvSpec {
            kernel,
            strides,
            input,
            activation,
        };
        cs.output_dims()?;
        Ok(cs)
    }

    /// Largest `S×T` with `σ(S − 1) + Kh ≤ H` and `τ(T − 1) + Kw ≤ W`.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel.shape();
        let (h, w) = self.input;
        let (sg, ta) = self.strides;
        if kh == 0 || kw == 0 || sg == 0 || ta == 0 {
            return shape_err("kernel dims and strides must be positive");
        }
        if kh > h || kw > w {
            return shape_err(format!("kernel {kh}x{kw} overflows input {h}x{w}"));
        }
        Ok(((h - kh) / sg + 1, (w - kw) / ta + 1))
    }

    /// Kernel entry multiplying `x[i,j]` in output `(s,t)`, or `None` outside
    /// the receptive field.
    fn window(&self, s: usize, t: usize, i: usize, j: usize) -> Option<f64> {
        let (i0, j0) = (self.strides.0 * s, self.strides.1 * t);
        let (kh, kw) = self.kernel.shape();
        if i >= i0 && i < i0 + kh && j >= j0 && j < j0 + kw {
            Some(self.kernel[(i - i0, j - j0)])
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTrace {
    pub z: Mat,
    pub v: Mat,
}

pub fn conv_forward(cs: &ConvSpec, x: &Mat) -> Result<ConvTrace> {
    let (so, to) = cs.output_dims()?;
    if x.shape() != cs.input {
        return shape_err(format!("input {:?}, spec expects {:?}", x.shape(), cs.input));
    }
    let (kh, kw) = cs.kernel.shape();
    let (sg, ta) = cs.strides;
    let z = Mat::from_fn(so, to, |s, t| {
        let mut acc = 0.0;
        for l in 0..kh {
            for k in 0..kw {
                acc += cs.kernel[(l, k)] * x[(sg * s + l, ta * t + k)];
            }
        }
        acc
    });
    let v = Mat::from_fn(so, to, |s, t| cs.activation.eval(z[(s, t)]));
    Ok(ConvTrace { z, v })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDerivs {
    /// `(S·T) × (Kh·Kw)`
    pub dv_dw: Mat,
    /// `(S·T) × (H·W)`
    pub dv_dx: Mat,
    /// Per output, `(Kh·Kw) × (Kh·Kw)`.
    pub d2v_dwdw: Vec<Mat>,
    /// Per output, `(Kh·Kw) × (H·W)`.
    pub d2v_dwdx: Vec<Mat>,
    /// Per output, `(H·W) × (H·W)`.
    pub d2v_dxdx: Vec<Mat>,
}

pub fn conv_derivs(cs: &ConvSpec, x: &Mat, trace: &ConvTrace) -> Result<ConvDerivs> {
    let (so, to) = cs.output_dims()?;
    if x.shape() != cs.input || trace.z.shape() != (so, to) {
        return shape_err("input or trace does not match the convolution spec");
    }
    let (kh, kw) = cs.kernel.shape();
    let (h, w) = cs.input;
    let (sg, ta) = cs.strides;
    let nk = kh * kw;
    let nx = h * w;
    let act = cs.activation;
    let mut dv_dw = Mat::zeros(so * to, nk);
    let mut dv_dx = Mat::zeros(so * to, nx);
    let mut d2v_dwdw = Vec::with_capacity(so * to);
    let mut d2v_dwdx = Vec::with_capacity(so * to);
    let mut d2v_dxdx = Vec::with_capacity(so * to);
    for s in 0..so {
        for t in 0..to {
            let o = s * to + t;
            let a1 = act.d1(trace.z[(s, t)]);
            let a2 = act.d2(trace.z[(s, t)]);
            let patch: Vec<f64> = (0..nk).map(|lk| x[(sg * s + lk / kw, ta * t + lk % kw)]).collect();
            let win: Vec<f64> = (0..nx)
                .map(|ij| cs.window(s, t, ij / w, ij % w).unwrap_or(0.0))
                .collect();
            for lk in 0..nk {
                dv_dw[(o, lk)] = a1 * patch[lk];
            }
            for ij in 0..nx {
                dv_dx[(o, ij)] = a1 * win[ij];
            }
            d2v_dwdw.push(Mat::outer(&patch, &patch).scaled(a2));
            let mut wx = Mat::outer(&patch, &win).scaled(a2);
            for lk in 0..nk {
                // x[i,j] is the entry under kernel position (l,k).
                let ij = (sg * s + lk / kw) * w + ta * t + lk % kw;
                wx[(lk, ij)] += a1;
            }
            d2v_dwdx.push(wx);
            d2v_dxdx.push(Mat::outer(&win, &win).scaled(a2));
        }
    }
    Ok(ConvDerivs {
        dv_dw,
        dv_dx,
        d2v_dwdw,
        d2v_dwdx,
        d2v_dxdx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{fd_jacobian, max_abs_err, FdConfig};
    use crate::rng::Rng;

    fn rand_mat(rng: &mut Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn one_by_one_kernel_scales_input() {
        let cs = ConvSpec::new(Mat::from_rows(&[&[2.5]]), (1, 1), (3, 2), ActKind::Identity).unwrap();
        let x = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let tr = conv_forward(&cs, &x).unwrap();
        assert_eq!(tr.v, x.scaled(2.5));
        let d = conv_derivs(&cs, &x, &tr).unwrap();
        assert_eq!(d.dv_dw.col(0), x.as_slice().to_vec());
    }

    #[test]
    fn all_ones_kernel_sums_input() {
        let cs = ConvSpec::new(Mat::from_fn(2, 2, |_, _| 1.0), (1, 1), (2, 2), ActKind::Relu).unwrap();
        let x = Mat::from_rows(&[&[1.0, -2.0], &[3.0, 4.5]]);
        let tr = conv_forward(&cs, &x).unwrap();
        assert_eq!(tr.z.shape(), (1, 1));
        assert_eq!(tr.z[(0, 0)], 6.5);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = Rng::new(1);
        let cs = ConvSpec::new(rand_mat(&mut rng, 2, 3), (2, 1), (7, 6), ActKind::Tanh).unwrap();
        let x = rand_mat(&mut rng, 7, 6);
        let tr = conv_forward(&cs, &x).unwrap();
        assert_eq!(tr.z.shape(), (3, 4));
        for s in 0..3 {
            for t in 0..4 {
                let mut z = 0.0;
                for i in 0..7 {
                    for j in 0..6 {
                        if let Some(wv) = cs.window(s, t, i, j) {
                            z += wv * x[(i, j)];
                        }
                    }
                }
                assert!((z - tr.z[(s, t)]).abs() <= 1e-14 * z.abs().max(1.0));
                assert_eq!(tr.v[(s, t)], tr.z[(s, t)].tanh());
            }
        }
    }

    #[test]
    fn overflow_rejected() {
        assert!(ConvSpec::new(Mat::zeros(3, 1), (1, 1), (2, 2), ActKind::Relu).is_err());
        assert!(ConvSpec::new(Mat::zeros(1, 1), (0, 1), (2, 2), ActKind::Relu).is_err());
        let cs = ConvSpec::new(Mat::zeros(1, 1), (1, 1), (2, 2), ActKind::Relu).unwrap();
        assert!(conv_forward(&cs, &Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn relu_has_no_second_weight_derivative() {
        let mut rng = Rng::new(2);
        let cs = ConvSpec::new(rand_mat(&mut rng, 2, 2), (1, 1), (4, 4), ActKind::Relu).unwrap();
        let x = rand_mat(&mut rng, 4, 4);
        let tr = conv_forward(&cs, &x).unwrap();
        let d = conv_derivs(&cs, &x, &tr).unwrap();
        assert!(d.d2v_dwdw.iter().all(|m| m.max_abs() == 0.0));
        assert!(d.d2v_dxdx.iter().all(|m| m.max_abs() == 0.0));
    }

    /// Checks every family against FD on one configuration.
    fn check_fd(strides: (usize, usize), input: (usize, usize), seed: u64) {
        let mut rng = Rng::new(seed);
        let kernel = rand_mat(&mut rng, 2, 2);
        let cs = ConvSpec::new(kernel.clone(), strides, input, ActKind::Tanh).unwrap();
        let x = rand_mat(&mut rng, input.0, input.1);
        let tr = conv_forward(&cs, &x).unwrap();
        let d = conv_derivs(&cs, &x, &tr).unwrap();
        let cfg = FdConfig::default();
        let with = |kf: &[f64], xf: &[f64]| {
            let k = Mat::new(2, 2, kf.to_vec()).unwrap();
            let cs2 = ConvSpec { kernel: k, ..cs.clone() };
            let xm = Mat::new(input.0, input.1, xf.to_vec()).unwrap();
            let tr2 = conv_forward(&cs2, &xm).unwrap();
            (cs2, xm, tr2)
        };
        let k0 = kernel.as_slice().to_vec();
        let x0 = x.as_slice().to_vec();
        let fd_w = fd_jacobian(|kf| Ok(with(kf, &x0).2.v.into_vec()), &k0, &cfg).unwrap();
        assert!(max_abs_err(fd_w.as_slice(), d.dv_dw.as_slice()) <= 1e-6);
        let fd_x = fd_jacobian(|xf| Ok(with(&k0, xf).2.v.into_vec()), &x0, &cfg).unwrap();
        assert!(max_abs_err(fd_x.as_slice(), d.dv_dx.as_slice()) <= 1e-6);
        let outputs = d.d2v_dwdw.len();
        for o in 0..outputs {
            let first_w = |kf: &[f64], xf: &[f64]| {
                let (cs2, xm, tr2) = with(kf, xf);
                conv_derivs(&cs2, &xm, &tr2).unwrap().dv_dw.row(o).to_vec()
            };
            let first_x = |kf: &[f64], xf: &[f64]| {
                let (cs2, xm, tr2) = with(kf, xf);
                conv_derivs(&cs2, &xm, &tr2).unwrap().dv_dx.row(o).to_vec()
            };
            let ww = fd_jacobian(|kf| Ok(first_w(kf, &x0)), &k0, &cfg).unwrap();
            assert!(max_abs_err(ww.as_slice(), d.d2v_dwdw[o].as_slice()) <= 1e-6);
            let wx = fd_jacobian(|xf| Ok(first_w(&k0, xf)), &x0, &cfg).unwrap();
            assert!(max_abs_err(wx.as_slice(), d.d2v_dwdx[o].as_slice()) <= 1e-6);
            let xx = fd_jacobian(|xf| Ok(first_x(&k0, xf)), &x0, &cfg).unwrap();
            assert!(max_abs_err(xx.as_slice(), d.d2v_dxdx[o].as_slice()) <= 1e-6);
        }
    }

    #[test]
    fn families_match_fd_stride_one() {
        check_fd((1, 1), (4, 4), 3);
    }

    #[test]
    fn families_match_fd_with_uncovered_border() {
        // Stride 2 on a 5×5 input leaves row and column 4 outside every
        // window, exercising the zero branches.
        check_fd((2, 2), (5, 5), 4);
    }
}
