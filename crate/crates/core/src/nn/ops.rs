use super::{BnParams, ConvWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Direct cross-correlation of every sample in `input` with `w`.
pub fn conv_forward(input: &Tensor4, w: &ConvWeights) -> Result<Tensor4> {
    let [n, c, h, wd] = input.dims();
    if c != w.in_channels() {
        return Err(Error::Shape(format!(
            "conv input has {c} channels, kernel {:?} expects {}",
            w.dims(),
            w.in_channels()
        )));
    }
    let (oh, ow) = w.output_size(h, wd)?;
    let mut data = Vec::with_capacity(n * w.out_channels() * oh * ow);
    for i in 0..n {
        data.extend(conv_sample(input.sample(i), h, wd, w, oh, ow));
    }
    Tensor4::new([n, w.out_channels(), oh, ow], data)
}

/// One-sample convolution. Accumulates in f32 in a fixed
/// `(out, in, ky, kx, oy, ox)` order.
pub(crate) fn conv_sample(x: &[f32], h: usize, w: usize, k: &ConvWeights, oh: usize, ow: usize) -> Vec<f32> {
    let (ks, stride, pad) = (k.kernel(), k.stride(), k.padding() as isize);
    let inp = k.in_channels();
    let mut out = vec![0.0f32; k.out_channels() * oh * ow];
    for (o, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        for i in 0..inp {
            let src = &x[i * h * w..(i + 1) * h * w];
            let kern = &k.data()[((o * inp + i) * ks) * ks..((o * inp + i) * ks + ks) * ks];
            for ky in 0..ks {
                for kx in 0..ks {
                    let wv = kern[ky * ks + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-channel `(scale, shift)` so that `bn(z) = scale * z + shift`.
pub(crate) fn bn_affine(bn: &BnParams) -> Vec<(f32, f32)> {
    (0..bn.len())
        .map(|j| {
            let scale = bn.gamma[j] as f64 / bn.sigma(j);
            let shift = bn.beta[j] as f64 - scale * bn.mean[j] as f64;
            (scale as f32, shift as f32)
        })
        .collect()
}

pub(crate) fn bn_sample(z: &mut [f32], plane: usize, affine: &[(f32, f32)]) {
    for (chunk, &(scale, shift)) in z.chunks_exact_mut(plane).zip(affine) {
        for v in chunk {
            *v = *v * scale + shift;
        }
    }
}

pub fn bn_forward(z: &Tensor4, bn: &BnParams) -> Result<Tensor4> {
    if z.c() != bn.len() {
        return Err(Error::Shape(format!(
            "batch-norm has {} channels, input has {}",
            bn.len(),
            z.c()
        )));
    }
    let affine = bn_affine(bn);
    let mut out = z.clone();
    let plane = z.h() * z.w();
    for sample in out.data_mut().chunks_exact_mut(z.sample_len()) {
        bn_sample(sample, plane, &affine);
    }
    Ok(out)
}

pub(crate) fn relu_in_place(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    relu_in_place(out.data_mut());
    out
}
