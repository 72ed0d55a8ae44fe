//! Convolution kernels shared by the forward and backward passes.
//!
//! All convolutions follow the deep-learning convention (cross-correlation,
//! no kernel flip). The standard convolution is computed as an im2col gather
//! followed by a matrix multiply; the 1x1 case skips the gather entirely.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

pub fn conv_out_len(t: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let span = (kernel - 1) * dilation + 1;
    let padded = t + 2 * pad;
    if padded < span {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

/// Gathers x [Cin, T] into columns [Cin*K, T'].
pub fn im2col(
    x: &ArrayView2<f64>,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Array2<f64> {
    let (cin, t) = x.dim();
    let t_out = conv_out_len(t, kernel, stride, dilation, pad).expect("checked by caller");
    let mut cols = Array2::<f64>::zeros((cin * kernel, t_out));
    for ci in 0..cin {
        for k in 0..kernel {
            let row = ci * kernel + k;
            for to in 0..t_out {
                let idx = (to * stride + k * dilation) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < t {
                    cols[(row, to)] = x[(ci, idx as usize)];
                }
            }
        }
    }
    cols
}

/// Scatter-adds columns [Cin*K, T'] back into a signal [Cin, T].
pub fn col2im(
    cols: &ArrayView2<f64>,
    cin: usize,
    t: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Array2<f64> {
    let t_out = cols.ncols();
    let mut x = Array2::<f64>::zeros((cin, t));
    for ci in 0..cin {
        for k in 0..kernel {
            let row = ci * kernel + k;
            for to in 0..t_out {
                let idx = (to * stride + k * dilation) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < t {
                    x[(ci, idx as usize)] += cols[(row, to)];
                }
            }
        }
    }
    x
}

/// Forward conv1d: x [Cin, T], w [Cout, Cin, K] -> y [Cout, T'].
pub fn conv1d_forward(
    x: &ArrayView2<f64>,
    w: &ArrayView3<f64>,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Array2<f64> {
    let (cout, cin, kernel) = w.dim();
    let w2 = w
        .to_shape((cout, cin * kernel))
        .expect("contiguous weight")
        .to_owned();
    if kernel == 1 && stride == 1 && dilation == 1 && pad == 0 {
        return w2.dot(x);
    }
    let cols = im2col(x, kernel, stride, dilation, pad);
    w2.dot(&cols)
}

/// Backward conv1d: returns (grad_x, grad_w).
pub fn conv1d_backward(
    x: &ArrayView2<f64>,
    w: &ArrayView3<f64>,
    gy: &ArrayView2<f64>,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> (Array2<f64>, Array3<f64>) {
    let (cout, cin, kernel) = w.dim();
    let (_, t) = x.dim();
    let w2 = w
        .to_shape((cout, cin * kernel))
        .expect("contiguous weight")
        .to_owned();
    if kernel == 1 && stride == 1 && dilation == 1 && pad == 0 {
        let gx = w2.t().dot(gy);
        let gw2 = gy.dot(&x.t());
        let gw = gw2
            .to_shape((cout, cin, kernel))
            .expect("weight grad shape")
            .to_owned();
        return (gx, gw);
    }
    let cols = im2col(x, kernel, stride, dilation, pad);
    let gw2 = gy.dot(&cols.t());
    let gw = gw2
        .to_shape((cout, cin, kernel))
        .expect("weight grad shape")
        .to_owned();
    let gcols = w2.t().dot(gy);
    let gx = col2im(&gcols.view(), cin, t, kernel, stride, dilation, pad);
    (gx, gw)
}

/// Forward transposed conv1d: x [Cin, T], w [Cin, Cout, K] -> y [Cout, (T-1)*stride + K].
pub fn conv_transpose1d_forward(
    x: &ArrayView2<f64>,
    w: &ArrayView3<f64>,
    stride: usize,
) -> Array2<f64> {
    let (cin, t) = x.dim();
    let (_, cout, kernel) = w.dim();
    let t_out = (t - 1) * stride + kernel;
    let w2 = w
        .to_shape((cin, cout * kernel))
        .expect("contiguous weight")
        .to_owned();
    // tmp [(Cout*K), T] then scatter along time
    let tmp = w2.t().dot(x);
    let mut y = Array2::<f64>::zeros((cout, t_out));
    for co in 0..cout {
        for k in 0..kernel {
            let row = co * kernel + k;
            for j in 0..t {
                y[(co, j * stride + k)] += tmp[(row, j)];
            }
        }
    }
    y
}

/// Backward transposed conv1d: returns (grad_x, grad_w).
pub fn conv_transpose1d_backward(
    x: &ArrayView2<f64>,
    w: &ArrayView3<f64>,
    gy: &ArrayView2<f64>,
    stride: usize,
) -> (Array2<f64>, Array3<f64>) {
    let (cin, t) = x.dim();
    let (_, cout, kernel) = w.dim();
    // gather gy into [(Cout*K), T]
    let mut g = Array2::<f64>::zeros((cout * kernel, t));
    for co in 0..cout {
        for k in 0..kernel {
            let row = co * kernel + k;
            for j in 0..t {
                g[(row, j)] = gy[(co, j * stride + k)];
            }
        }
    }
    let w2 = w
        .to_shape((cin, cout * kernel))
        .expect("contiguous weight")
        .to_owned();
    let gx = w2.dot(&g);
    let gw2 = x.dot(&g.t());
    let gw = gw2
        .to_shape((cin, cout, kernel))
        .expect("weight grad shape")
        .to_owned();
    (gx, gw)
}

/// Forward depthwise conv1d: x [C, T], w [C, K] -> y [C, T'], one filter per channel.
pub fn depthwise_conv1d_forward(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    dilation: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, t) = x.dim();
    let kernel = w.ncols();
    let t_out = conv_out_len(t, kernel, 1, dilation, pad).expect("checked by caller");
    let mut y = Array2::<f64>::zeros((c, t_out));
    for ci in 0..c {
        for to in 0..t_out {
            let mut acc = 0.0;
            for k in 0..kernel {
                let idx = (to + k * dilation) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < t {
                    acc += x[(ci, idx as usize)] * w[(ci, k)];
                }
            }
            y[(ci, to)] = acc;
        }
    }
    y
}

/// Backward depthwise conv1d: returns (grad_x, grad_w).
pub fn depthwise_conv1d_backward(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    gy: &ArrayView2<f64>,
    dilation: usize,
    pad: usize,
) -> (Array2<f64>, Array2<f64>) {
    let (c, t) = x.dim();
    let kernel = w.ncols();
    let t_out = gy.ncols();
    let mut gx = Array2::<f64>::zeros((c, t));
    let mut gw = Array2::<f64>::zeros((c, kernel));
    for ci in 0..c {
        for to in 0..t_out {
            let g = gy[(ci, to)];
            for k in 0..kernel {
                let idx = (to + k * dilation) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < t {
                    gx[(ci, idx as usize)] += g * w[(ci, k)];
                    gw[(ci, k)] += g * x[(ci, idx as usize)];
                }
            }
        }
    }
    (gx, gw)
}
