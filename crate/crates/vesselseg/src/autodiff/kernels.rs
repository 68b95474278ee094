//! Forward kernels and backward rules for the tape ops.
//!
//! Convolution-style kernels parallelize over (batch, channel) output slabs;
//! each slab is accumulated sequentially in a fixed order.

use super::{Op, Tape, Tensor, VarId};
use crate::error::Result;
use crate::parallel;

#[inline]
fn range_for(offset: i64, n: usize) -> (usize, usize) {
    // x such that 0 <= x + offset < n
    let lo = (-offset).max(0) as usize;
    let hi = ((n as i64 - offset).min(n as i64)).max(0) as usize;
    (lo, hi)
}

pub(super) fn conv3d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    [b, cin, nx, ny, nz]: [usize; 5],
    cout: usize,
    k: usize,
) -> Tensor {
    let pad = (k / 2) as i64;
    let s = nx * ny * nz;
    let mut out = Tensor::zeros(vec![b, cout, nx, ny, nz]);
    parallel::for_each_chunk_mut(&mut out.data, s, |chunk_idx, slab| {
        let bi = chunk_idx / cout;
        let co = chunk_idx % cout;
        if let Some(bt) = bias {
            slab.fill(bt.data[co]);
        }
        for ci in 0..cin {
            let xbase = (bi * cin + ci) * s;
            for kx in 0..k {
                let dx = kx as i64 - pad;
                let (x0, x1) = range_for(dx, nx);
                for ky in 0..k {
                    let dy = ky as i64 - pad;
                    let (y0, y1) = range_for(dy, ny);
                    for kz in 0..k {
                        let dz = kz as i64 - pad;
                        let (z0, z1) = range_for(dz, nz);
                        if z0 >= z1 || y0 >= y1 || x0 >= x1 {
                            continue;
                        }
                        let wv = w.data[(((co * cin + ci) * k + kx) * k + ky) * k + kz];
                        if wv == 0.0 {
                            continue;
                        }
                        for xx in x0..x1 {
                            let sx = (xx as i64 + dx) as usize;
                            for yy in y0..y1 {
                                let sy = (yy as i64 + dy) as usize;
                                let orow = (xx * ny + yy) * nz;
                                let irow = xbase + (sx * ny + sy) * nz;
                                let src =
                                    &x.data[irow + (z0 as i64 + dz) as usize..irow + (z1 as i64 + dz) as usize];
                                let dst = &mut slab[orow + z0..orow + z1];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv3d_backward_input(
    gout: &[f64],
    w: &Tensor,
    gin: &mut [f64],
    [_b, cin, nx, ny, nz]: [usize; 5],
    cout: usize,
    k: usize,
) {
    let pad = (k / 2) as i64;
    let s = nx * ny * nz;
    parallel::for_each_chunk_mut(gin, s, |chunk_idx, slab| {
        let bi = chunk_idx / cin;
        let ci = chunk_idx % cin;
        for co in 0..cout {
            let gbase = (bi * cout + co) * s;
            for kx in 0..k {
                let dx = -(kx as i64 - pad); // gin[q] += w * gout[q - d]
                let (x0, x1) = range_for(dx, nx);
                for ky in 0..k {
                    let dy = -(ky as i64 - pad);
                    let (y0, y1) = range_for(dy, ny);
                    for kz in 0..k {
                        let dz = -(kz as i64 - pad);
                        let (z0, z1) = range_for(dz, nz);
                        if z0 >= z1 || y0 >= y1 || x0 >= x1 {
                            continue;
                        }
                        let wv = w.data[(((co * cin + ci) * k + kx) * k + ky) * k + kz];
                        if wv == 0.0 {
                            continue;
                        }
                        for xx in x0..x1 {
                            let sx = (xx as i64 + dx) as usize;
                            for yy in y0..y1 {
                                let sy = (yy as i64 + dy) as usize;
                                let orow = (xx * ny + yy) * nz;
                                let grow = gbase + (sx * ny + sy) * nz;
                                let src = &gout
                                    [grow + (z0 as i64 + dz) as usize..grow + (z1 as i64 + dz) as usize];
                                let dst = &mut slab[orow + z0..orow + z1];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv3d_backward_weight(
    gout: &[f64],
    x: &Tensor,
    gw: &mut [f64],
    [b, cin, nx, ny, nz]: [usize; 5],
    cout: usize,
    k: usize,
) {
    let pad = (k / 2) as i64;
    let s = nx * ny * nz;
    parallel::for_each_chunk_mut(gw, k * k * k, |chunk_idx, wslab| {
        let co = chunk_idx / cin;
        let ci = chunk_idx % cin;
        for kx in 0..k {
            let dx = kx as i64 - pad;
            let (x0, x1) = range_for(dx, nx);
            for ky in 0..k {
                let dy = ky as i64 - pad;
                let (y0, y1) = range_for(dy, ny);
                for kz in 0..k {
                    let dz = kz as i64 - pad;
                    let (z0, z1) = range_for(dz, nz);
                    let mut acc = 0.0f64;
                    for bi in 0..b {
                        let gbase = (bi * cout + co) * s;
                        let xbase = (bi * cin + ci) * s;
                        for xx in x0..x1 {
                            let sx = (xx as i64 + dx) as usize;
                            for yy in y0..y1 {
                                let sy = (yy as i64 + dy) as usize;
                                let grow = gbase + (xx * ny + yy) * nz;
                                let xrow = xbase + (sx * ny + sy) * nz;
                                let gs = &gout[grow + z0..grow + z1];
                                let xs = &x.data
                                    [xrow + (z0 as i64 + dz) as usize..xrow + (z1 as i64 + dz) as usize];
                                for (g, v) in gs.iter().zip(xs) {
                                    acc += g * v;
                                }
                            }
                        }
                    }
                    wslab[(kx * k + ky) * k + kz] += acc;
                }
            }
        }
    });
}

pub(super) fn maxpool3d_forward(x: &Tensor, [b, c, nx, ny, nz]: [usize; 5]) -> (Tensor, Vec<u32>) {
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let so = ox * oy * oz;
    let si = nx * ny * nz;
    let mut out = Tensor::zeros(vec![b, c, ox, oy, oz]);
    let mut indices = vec![0u32; b * c * so];
    // indices chunks align with out chunks
    let idx_chunks: Vec<(Vec<f64>, Vec<u32>)> = parallel::map_indexed(b * c, |bc| {
        let base = bc * si;
        let mut vals = vec![0.0f64; so];
        let mut idxs = vec![0u32; so];
        for px in 0..ox {
            for py in 0..oy {
                for pz in 0..oz {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                let lin =
                                    ((2 * px + dx) * ny + (2 * py + dy)) * nz + (2 * pz + dz);
                                let v = x.data[base + lin];
                                if v > best {
                                    best = v;
                                    best_idx = base + lin;
                                }
                            }
                        }
                    }
                    let o = (px * oy + py) * oz + pz;
                    vals[o] = best;
                    idxs[o] = best_idx as u32;
                }
            }
        }
        (vals, idxs)
    });
    for (bc, (vals, idxs)) in idx_chunks.into_iter().enumerate() {
        out.data[bc * so..(bc + 1) * so].copy_from_slice(&vals);
        indices[bc * so..(bc + 1) * so].copy_from_slice(&idxs);
    }
    (out, indices)
}

pub(super) fn upconv3d_forward(
    x: &Tensor,
    w: &Tensor,
    [b, cin, nx, ny, nz]: [usize; 5],
    cout: usize,
) -> Tensor {
    let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
    let so = ox * oy * oz;
    let si = nx * ny * nz;
    let mut out = Tensor::zeros(vec![b, cout, ox, oy, oz]);
    parallel::for_each_chunk_mut(&mut out.data, so, |chunk_idx, slab| {
        let bi = chunk_idx / cout;
        let co = chunk_idx % cout;
        for px in 0..ox {
            let (sx, dx) = (px / 2, px % 2);
            for py in 0..oy {
                let (sy, dy) = (py / 2, py % 2);
                for pz in 0..oz {
                    let (sz, dz) = (pz / 2, pz % 2);
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        let v = x.data[(bi * cin + ci) * si + (sx * ny + sy) * nz + sz];
                        let wv = w.data[(((ci * cout + co) * 2 + dx) * 2 + dy) * 2 + dz];
                        acc += v * wv;
                    }
                    slab[(px * oy + py) * oz + pz] = acc;
                }
            }
        }
    });
    out
}

fn upconv3d_backward_input(
    gout: &[f64],
    w: &Tensor,
    gin: &mut [f64],
    [_b, cin, nx, ny, nz]: [usize; 5],
    cout: usize,
) {
    let (oy, oz) = (2 * ny, 2 * nz);
    let so = 8 * nx * ny * nz;
    let si = nx * ny * nz;
    parallel::for_each_chunk_mut(gin, si, |chunk_idx, slab| {
        let bi = chunk_idx / cin;
        let ci = chunk_idx % cin;
        for sx in 0..nx {
            for sy in 0..ny {
                for sz in 0..nz {
                    let mut acc = 0.0;
                    for co in 0..cout {
                        let gbase = (bi * cout + co) * so;
                        for dx in 0..2 {
                            for dy in 0..2 {
                                for dz in 0..2 {
                                    let g = gout[gbase
                                        + ((2 * sx + dx) * oy + (2 * sy + dy)) * oz
                                        + (2 * sz + dz)];
                                    let wv =
                                        w.data[(((ci * cout + co) * 2 + dx) * 2 + dy) * 2 + dz];
                                    acc += g * wv;
                                }
                            }
                        }
                    }
                    slab[(sx * ny + sy) * nz + sz] += acc;
                }
            }
        }
    });
}

fn upconv3d_backward_weight(
    gout: &[f64],
    x: &Tensor,
    gw: &mut [f64],
    [b, cin, nx, ny, nz]: [usize; 5],
    cout: usize,
) {
    let (oy, oz) = (2 * ny, 2 * nz);
    let so = 8 * nx * ny * nz;
    let si = nx * ny * nz;
    parallel::for_each_chunk_mut(gw, 8, |chunk_idx, wslab| {
        let ci = chunk_idx / cout;
        let co = chunk_idx % cout;
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let xbase = (bi * cin + ci) * si;
                        let gbase = (bi * cout + co) * so;
                        for sx in 0..nx {
                            for sy in 0..ny {
                                for sz in 0..nz {
                                    let v = x.data[xbase + (sx * ny + sy) * nz + sz];
                                    let g = gout[gbase
                                        + ((2 * sx + dx) * oy + (2 * sy + dy)) * oz
                                        + (2 * sz + dz)];
                                    acc += v * g;
                                }
                            }
                        }
                    }
                    wslab[(dx * 2 + dy) * 2 + dz] += acc;
                }
            }
        }
    });
}

pub(super) fn concat_forward(a: &Tensor, b: &Tensor, [bn, ca, cb, s]: [usize; 4]) -> Tensor {
    let mut shape = a.shape.clone();
    shape[1] = ca + cb;
    let mut data = Vec::with_capacity(bn * (ca + cb) * s);
    for bi in 0..bn {
        data.extend_from_slice(&a.data[bi * ca * s..(bi + 1) * ca * s]);
        data.extend_from_slice(&b.data[bi * cb * s..(bi + 1) * cb * s]);
    }
    Tensor { shape, data }
}

pub(super) fn instance_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    [b, c, s]: [usize; 3],
    eps: f64,
) -> (Tensor, Vec<(f64, f64)>) {
    let mut out = Tensor::zeros(x.shape.clone());
    let stats: Vec<(f64, f64)> = parallel::map_indexed(b * c, |bc| {
        let slice = &x.data[bc * s..(bc + 1) * s];
        let mean = slice.iter().sum::<f64>() / s as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
        (mean, 1.0 / (var + eps).sqrt())
    });
    parallel::for_each_chunk_mut(&mut out.data, s, |bc, slab| {
        let (mean, inv_std) = stats[bc];
        let ch = bc % c;
        let (g, bsh) = (gain.data[ch], bias.data[ch]);
        let src = &x.data[bc * s..(bc + 1) * s];
        for (o, &v) in slab.iter_mut().zip(src) {
            *o = g * (v - mean) * inv_std + bsh;
        }
    });
    (out, stats)
}

fn with_grad(tape: &mut Tape, id: VarId, f: impl FnOnce(&Tape, &mut [f64])) {
    if !tape.requires[id.0] {
        return;
    }
    let mut g = std::mem::take(&mut tape.grads[id.0]);
    f(tape, &mut g);
    tape.grads[id.0] = g;
}

/// Applies the backward rule for node `i`, accumulating into input grads.
pub(super) fn backward_step(tape: &mut Tape, i: usize, gout: &[f64]) -> Result<()> {
    // ops are never removed, so index-based access is stable
    let op = std::mem::replace(&mut tape.ops[i], Op::Leaf);
    match &op {
        Op::Leaf => {}
        Op::Conv3d {
            input,
            weight,
            bias,
            kernel,
        } => {
            let dims = tape.values[input.0].dims5()?;
            let cout = tape.values[weight.0].shape[0];
            let k = *kernel;
            with_grad(tape, *input, |t, g| {
                conv3d_backward_input(gout, &t.values[weight.0], g, dims, cout, k);
            });
            with_grad(tape, *weight, |t, g| {
                conv3d_backward_weight(gout, &t.values[input.0], g, dims, cout, k);
            });
            if let Some(bid) = bias {
                let s = dims[2] * dims[3] * dims[4];
                with_grad(tape, *bid, |_, g| {
                    for bi in 0..dims[0] {
                        for (co, gc) in g.iter_mut().enumerate() {
                            let base = (bi * cout + co) * s;
                            *gc += gout[base..base + s].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
        Op::MaxPool3d { input, indices } => {
            with_grad(tape, *input, |_, g| {
                for (o, &idx) in indices.iter().enumerate() {
                    g[idx as usize] += gout[o];
                }
            });
        }
        Op::UpConv3d { input, weight } => {
            let dims = tape.values[input.0].dims5()?;
            let cout = tape.values[weight.0].shape[1];
            with_grad(tape, *input, |t, g| {
                upconv3d_backward_input(gout, &t.values[weight.0], g, dims, cout);
            });
            with_grad(tape, *weight, |t, g| {
                upconv3d_backward_weight(gout, &t.values[input.0], g, dims, cout);
            });
        }
        Op::Concat { a, b } => {
            let [bn, ca, ..] = tape.values[a.0].dims5()?;
            let cb = tape.values[b.0].shape[1];
            let s: usize = tape.values[a.0].shape[2..].iter().product();
            with_grad(tape, *a, |_, g| {
                for bi in 0..bn {
                    let src = bi * (ca + cb) * s;
                    let dst = bi * ca * s;
                    for j in 0..ca * s {
                        g[dst + j] += gout[src + j];
                    }
                }
            });
            with_grad(tape, *b, |_, g| {
                for bi in 0..bn {
                    let src = bi * (ca + cb) * s + ca * s;
                    let dst = bi * cb * s;
                    for j in 0..cb * s {
                        g[dst + j] += gout[src + j];
                    }
                }
            });
        }
        Op::Relu { input } => {
            with_grad(tape, *input, |t, g| {
                for (j, gv) in g.iter_mut().enumerate() {
                    if t.values[input.0].data[j] > 0.0 {
                        *gv += gout[j];
                    }
                }
            });
        }
        Op::Sigmoid { input } => {
            // node i holds the forward output y; dy/dx = y(1-y)
            let out_id = i;
            with_grad(tape, *input, |t, g| {
                let y = &t.values[out_id].data;
                for (j, gv) in g.iter_mut().enumerate() {
                    *gv += gout[j] * y[j] * (1.0 - y[j]);
                }
            });
        }
        Op::InstanceNorm {
            input,
            gain,
            bias,
            stats,
        } => {
            let [b, c, nx, ny, nz] = tape.values[input.0].dims5()?;
            let s = nx * ny * nz;
            with_grad(tape, *gain, |t, g| {
                let x = &t.values[input.0].data;
                for bc in 0..b * c {
                    let (mean, inv_std) = stats[bc];
                    let ch = bc % c;
                    let mut acc = 0.0;
                    for j in 0..s {
                        acc += gout[bc * s + j] * (x[bc * s + j] - mean) * inv_std;
                    }
                    g[ch] += acc;
                }
            });
            with_grad(tape, *bias, |_, g| {
                for bc in 0..b * c {
                    let ch = bc % c;
                    g[ch] += gout[bc * s..(bc + 1) * s].iter().sum::<f64>();
                }
            });
            with_grad(tape, *input, |t, g| {
                let x = &t.values[input.0].data;
                let gains = &t.values[gain.0].data;
                parallel::for_each_chunk_mut(g, s, |bc, slab| {
                    let (mean, inv_std) = stats[bc];
                    let gv = gains[bc % c];
                    let go = &gout[bc * s..(bc + 1) * s];
                    let xs = &x[bc * s..(bc + 1) * s];
                    let n = s as f64;
                    // dL/dxhat = gout * gain; standard normalization backward
                    let sum_dxhat: f64 = go.iter().map(|g| g * gv).sum();
                    let sum_dxhat_xhat: f64 = go
                        .iter()
                        .zip(xs)
                        .map(|(g, &v)| g * gv * (v - mean) * inv_std)
                        .sum();
                    for j in 0..s {
                        let xhat = (xs[j] - mean) * inv_std;
                        let dxhat = go[j] * gv;
                        slab[j] +=
                            inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                });
            });
        }
        Op::DiceLoss {
            pred,
            target,
            smooth,
            sums,
        } => {
            let (s1, s2, s3) = *sums;
            let denom = s2 + s3 + smooth;
            let numer = 2.0 * s1 + smooth;
            let g0 = gout[0];
            with_grad(tape, *pred, |_, g| {
                for (j, gv) in g.iter_mut().enumerate() {
                    let t = target.data[j];
                    // d/dp [ -(2 s1 + s)/(s2 + s3 + s) ]
                    *gv += g0 * (-(2.0 * t * denom - numer) / (denom * denom));
                }
            });
        }
        Op::L1Penalty { inputs, weight } => {
            let g0 = gout[0];
            for id in inputs {
                with_grad(tape, *id, |t, g| {
                    for (j, gv) in g.iter_mut().enumerate() {
                        let v = t.values[id.0].data[j];
                        *gv += g0 * weight * v.signum() * (v != 0.0) as u8 as f64;
                    }
                });
            }
        }
        Op::Sum { input } => {
            let g0 = gout[0];
            with_grad(tape, *input, |_, g| {
                for gv in g.iter_mut() {
                    *gv += g0;
                }
            });
        }
        Op::HalfSquaredNorm { input } => {
            let g0 = gout[0];
            with_grad(tape, *input, |t, g| {
                for (j, gv) in g.iter_mut().enumerate() {
                    *gv += g0 * t.values[input.0].data[j];
                }
            });
        }
        Op::Add { a, b } => {
            with_grad(tape, *a, |_, g| {
                for (gv, go) in g.iter_mut().zip(gout) {
                    *gv += go;
                }
            });
            with_grad(tape, *b, |_, g| {
                for (gv, go) in g.iter_mut().zip(gout) {
                    *gv += go;
                }
            });
        }
    }
    tape.ops[i] = op;
    Ok(())
}
