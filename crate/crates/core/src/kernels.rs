//! Forward and adjoint kernels on raw row-major buffers.
//!
//! Layout conventions: feature maps are `[channels, height, width]`, 3x3
//! kernels are `[out, in, 3, 3]`, matrices are `[rows, cols]`.

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Adjoint of `matmul` w.r.t. the left operand: `dy [m,n] x b^T -> [m,k]`.
pub fn matmul_grad_left(dy: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = dyrow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Adjoint of `matmul` w.r.t. the right operand: `a^T x dy -> [k,n]`.
pub fn matmul_grad_right(a: &[f64], dy: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &g) in orow.iter_mut().zip(dyrow) {
                *o += av * g;
            }
        }
    }
    out
}

/// Valid destination range along one axis for kernel tap `t ∈ {0,1,2}` with padding 1.
#[inline]
fn tap_range(t: usize, len: usize) -> (usize, usize) {
    // source index = dest + t - 1 must lie in [0, len)
    let lo = if t == 0 { 1 } else { 0 };
    let hi = if t == 2 { len - 1 } else { len };
    (lo, hi)
}

/// 3x3 convolution, stride 1, zero padding 1, no bias.
pub fn conv3x3(x: &[f64], w: &[f64], cin: usize, cout: usize, h: usize, wd: usize) -> Vec<f64> {
    let plane = h * wd;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let xplane = &x[i * plane..(i + 1) * plane];
            let kern = &w[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            for ky in 0..3 {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..3 {
                    let kv = kern[ky * 3 + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = tap_range(kx, wd);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let dst = &mut oplane[y * wd + x0..y * wd + x1];
                        let src = &xplane[sy * wd + x0 + kx - 1..sy * wd + x1 + kx - 1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `conv3x3` w.r.t. its input.
pub fn conv3x3_grad_input(
    dy: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let plane = h * wd;
    let mut dx = vec![0.0; cin * plane];
    for o in 0..cout {
        let gplane = &dy[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let xplane = &mut dx[i * plane..(i + 1) * plane];
            let kern = &w[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            for ky in 0..3 {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..3 {
                    let kv = kern[ky * 3 + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = tap_range(kx, wd);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let g = &gplane[y * wd + x0..y * wd + x1];
                        let d = &mut xplane[sy * wd + x0 + kx - 1..sy * wd + x1 + kx - 1];
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += kv * gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of `conv3x3` w.r.t. its kernel.
pub fn conv3x3_grad_weight(
    dy: &[f64],
    x: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let plane = h * wd;
    let mut dw = vec![0.0; cout * cin * 9];
    for o in 0..cout {
        let gplane = &dy[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let xplane = &x[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = tap_range(kx, wd);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let g = &gplane[y * wd + x0..y * wd + x1];
                        let s = &xplane[sy * wd + x0 + kx - 1..sy * wd + x1 + kx - 1];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[((o * cin + i) * 3 + ky) * 3 + kx] = acc;
                }
            }
        }
    }
    dw
}

pub fn upsample2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &x[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ch * h2 * w2 + y * w2..ch * h2 * w2 + (y + 1) * w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

/// Adjoint of `upsample2x`: sums each 2x2 block. `h, w` are the *input* sizes.
pub fn upsample2x_grad(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx[ch * h * w + (y / 2) * w + xx / 2] += dy[ch * h2 * w2 + y * w2 + xx];
            }
        }
    }
    dx
}

/// 2x2 mean pooling. `h, w` are the input sizes and must be even.
pub fn avgpool2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[ch * h2 * w2 + (y / 2) * w2 + xx / 2] += 0.25 * x[ch * h * w + y * w + xx];
            }
        }
    }
    out
}

pub fn avgpool2x_grad(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[ch * h * w + y * w + xx] = 0.25 * dy[ch * h2 * w2 + (y / 2) * w2 + xx / 2];
            }
        }
    }
    dx
}

/// `w''_{o,i,t} = s_i w_{o,i,t} / σ_o` with
/// `σ_o = sqrt(Σ_{i,t} (s_i w_{o,i,t})^2 + eps)`. `None` if some σ_o is zero.
pub fn mod_demod(w: &[f64], s: &[f64], eps: f64, cout: usize, cin: usize, taps: usize) -> Option<Vec<f64>> {
    let sigmas = sigmas(w, s, eps, cout, cin, taps)?;
    let mut out = vec![0.0; w.len()];
    for o in 0..cout {
        let inv = 1.0 / sigmas[o];
        for i in 0..cin {
            let base = (o * cin + i) * taps;
            let f = s[i] * inv;
            for t in 0..taps {
                out[base + t] = w[base + t] * f;
            }
        }
    }
    Some(out)
}

fn sigmas(w: &[f64], s: &[f64], eps: f64, cout: usize, cin: usize, taps: usize) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(cout);
    for o in 0..cout {
        let mut acc = 0.0;
        for i in 0..cin {
            let base = (o * cin + i) * taps;
            for t in 0..taps {
                let v = s[i] * w[base + t];
                acc += v * v;
            }
        }
        let sigma = (acc + eps).sqrt();
        if sigma <= 0.0 {
            return None;
        }
        out.push(sigma);
    }
    Some(out)
}

/// Adjoints of `mod_demod` w.r.t. `(w, s)` given the upstream gradient `g`.
pub fn mod_demod_grad(
    g: &[f64],
    w: &[f64],
    s: &[f64],
    eps: f64,
    cout: usize,
    cin: usize,
    taps: usize,
) -> (Vec<f64>, Vec<f64>) {
    let sig = sigmas(w, s, eps, cout, cin, taps).expect("forward pass already validated sigma");
    let mut dw = vec![0.0; w.len()];
    let mut ds = vec![0.0; cin];
    for o in 0..cout {
        let sigma = sig[o];
        // c_o = Σ g · w'
        let mut c = 0.0;
        for i in 0..cin {
            let base = (o * cin + i) * taps;
            for t in 0..taps {
                c += g[base + t] * s[i] * w[base + t];
            }
        }
        let k = c / (sigma * sigma * sigma);
        for i in 0..cin {
            let base = (o * cin + i) * taps;
            for t in 0..taps {
                // dL/dw'_{oit}
                let dwp = g[base + t] / sigma - s[i] * w[base + t] * k;
                dw[base + t] = dwp * s[i];
                ds[i] += dwp * w[base + t];
            }
        }
    }
    (dw, ds)
}
