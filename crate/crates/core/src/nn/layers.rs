//! Layer kernels with hand-written backward passes. Every spatial layer works
//! on `[n, c, d, h, w]` data; 2D networks simply carry a unit depth axis.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NnError, Tensor};
use crate::resample;

/// `C = A·B + beta·C` where `A` is `m×k`, `B` is `k×n`, both row-major
/// unless flagged as transposed storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window geometry between an image and a grid of window positions.
#[derive(Clone, Copy, Debug)]
struct Window {
    image: [usize; 3],
    positions: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Window {
    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn npos(&self) -> usize {
        self.positions.iter().product()
    }

    /// For kernel offset `k` along `axis`: for each position `o`, the image
    /// coordinate `o*s - p + k` or `None` when it falls in the padding.
    fn taps(&self, axis: usize, k: usize) -> Vec<Option<usize>> {
        (0..self.positions[axis])
            .map(|o| {
                let i = (o * self.stride[axis] + k) as isize - self.padding[axis] as isize;
                (i >= 0 && (i as usize) < self.image[axis]).then_some(i as usize)
            })
            .collect()
    }

    /// `[channels * kvol, npos]` patch matrix.
    fn im2col(&self, img: &[f64], channels: usize) -> Vec<f64> {
        let [id, ih, iw] = self.image;
        let npos = self.npos();
        let mut cols = vec![0.0; channels * self.kvol() * npos];
        let [kd, kh, kw] = self.kernel;
        let mut row = 0;
        for c in 0..channels {
            let chan = &img[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                let td = self.taps(0, a);
                for b in 0..kh {
                    let th = self.taps(1, b);
                    for e in 0..kw {
                        let tw = self.taps(2, e);
                        let out = &mut cols[row * npos..(row + 1) * npos];
                        let mut p = 0;
                        for z in &td {
                            for y in &th {
                                match (z, y) {
                                    (Some(z), Some(y)) => {
                                        let base = (z * ih + y) * iw;
                                        for x in &tw {
                                            if let Some(x) = x {
                                                out[p] = chan[base + x];
                                            }
                                            p += 1;
                                        }
                                    }
                                    _ => p += tw.len(),
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a patch matrix back onto the image.
    fn col2im(&self, cols: &[f64], channels: usize, img: &mut [f64]) {
        let [id, ih, iw] = self.image;
        let npos = self.npos();
        let [kd, kh, kw] = self.kernel;
        let mut row = 0;
        for c in 0..channels {
            let chan = &mut img[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                let td = self.taps(0, a);
                for b in 0..kh {
                    let th = self.taps(1, b);
                    for e in 0..kw {
                        let tw = self.taps(2, e);
                        let src = &cols[row * npos..(row + 1) * npos];
                        let mut p = 0;
                        for z in &td {
                            for y in &th {
                                match (z, y) {
                                    (Some(z), Some(y)) => {
                                        let base = (z * ih + y) * iw;
                                        for x in &tw {
                                            if let Some(x) = x {
                                                chan[base + x] += src[p];
                                            }
                                            p += 1;
                                        }
                                    }
                                    _ => p += tw.len(),
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn he_init<R: Rng>(weights: &mut [f64], fan_in: usize, rng: &mut R) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    for w in weights {
        *w = normal.sample(rng);
    }
}

/// Cross-correlation with zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// `[out, in, kd, kh, kw]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        let kvol: usize = kernel.iter().product();
        Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_ch * in_ch * kvol],
            bias: vec![0.0; out_ch],
        }
    }

    /// Stride 1 with padding that keeps the spatial extents.
    pub fn same(in_ch: usize, out_ch: usize, kernel: [usize; 3]) -> Self {
        Conv::new(in_ch, out_ch, kernel, [1; 3], kernel.map(|k| k / 2))
    }

    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        he_init(&mut self.weight, self.in_ch * self.kernel.iter().product::<usize>(), rng);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn out_dims(&self, input: [usize; 3]) -> Result<[usize; 3], NnError> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] || self.stride[a] == 0 {
                return Err(NnError::ShapeMismatch(format!(
                    "kernel {:?} does not fit input {:?}",
                    self.kernel, input
                )));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn window(&self, image: [usize; 3]) -> Result<Window, NnError> {
        Ok(Window {
            image,
            positions: self.out_dims(image)?,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        })
    }

    fn check_input(&self, dims: [usize; 5]) -> Result<(), NnError> {
        if dims[1] != self.in_ch {
            return Err(NnError::ShapeMismatch(format!(
                "conv expects {} channels, got {}",
                self.in_ch, dims[1]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let dims = x.dims5()?;
        self.check_input(dims)?;
        let win = self.window([dims[2], dims[3], dims[4]])?;
        let (kdim, npos) = (self.in_ch * win.kvol(), win.npos());
        let per_in = dims[1] * dims[2] * dims[3] * dims[4];
        let mut out = vec![0.0; dims[0] * self.out_ch * npos];
        for n in 0..dims[0] {
            let cols = win.im2col(&x.data()[n * per_in..(n + 1) * per_in], self.in_ch);
            let y = &mut out[n * self.out_ch * npos..(n + 1) * self.out_ch * npos];
            for (c, b) in self.bias.iter().enumerate() {
                y[c * npos..(c + 1) * npos].iter_mut().for_each(|v| *v = *b);
            }
            gemm(self.out_ch, kdim, npos, &self.weight, false, &cols, false, 1.0, y);
        }
        let p = win.positions;
        Ok(Tensor::with_dims5(x.shape().len(), [dims[0], self.out_ch, p[0], p[1], p[2]], out))
    }

    /// Accumulates parameter gradients into `gw`/`gb` and optionally returns
    /// the input gradient.
    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        grads: Option<(&mut [f64], &mut [f64])>,
        need_dx: bool,
    ) -> Result<Option<Tensor>, NnError> {
        let dims = x.dims5()?;
        self.check_input(dims)?;
        let win = self.window([dims[2], dims[3], dims[4]])?;
        let (kdim, npos) = (self.in_ch * win.kvol(), win.npos());
        let per_in = dims[1] * dims[2] * dims[3] * dims[4];
        if dy.len() != dims[0] * self.out_ch * npos {
            return Err(NnError::ShapeMismatch("conv output gradient has wrong size".into()));
        }
        let mut dx = need_dx.then(|| vec![0.0; x.len()]);
        let mut grads = grads;
        let mut dcols = vec![0.0; kdim * npos];
        for n in 0..dims[0] {
            let g = &dy.data()[n * self.out_ch * npos..(n + 1) * self.out_ch * npos];
            if let Some((gw, gb)) = grads.as_mut() {
                let cols = win.im2col(&x.data()[n * per_in..(n + 1) * per_in], self.in_ch);
                gemm(self.out_ch, npos, kdim, g, false, &cols, true, 1.0, gw);
                for c in 0..self.out_ch {
                    gb[c] += g[c * npos..(c + 1) * npos].iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(kdim, self.out_ch, npos, &self.weight, true, g, false, 0.0, &mut dcols);
                win.col2im(&dcols, self.in_ch, &mut dx[n * per_in..(n + 1) * per_in]);
            }
        }
        Ok(dx.map(|d| Tensor::with_dims5(x.shape().len(), dims, d)))
    }
}

/// Transposed convolution (fractionally strided), the adjoint of [`Conv`]
/// with respect to its input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// `[in, out, kd, kh, kw]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvTranspose {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        let kvol: usize = kernel.iter().product();
        ConvTranspose {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: vec![0.0; in_ch * out_ch * kvol],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        // Each output receives in_ch * (k/s)^d contributions.
        let overlap: usize = (0..3).map(|a| self.kernel[a].div_ceil(self.stride[a])).product();
        he_init(&mut self.weight, self.in_ch * overlap, rng);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn out_dims(&self, input: [usize; 3]) -> Result<[usize; 3], NnError> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(NnError::ShapeMismatch(format!(
                    "transposed conv padding {:?} too large",
                    self.padding
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }

    fn window(&self, input: [usize; 3]) -> Result<Window, NnError> {
        Ok(Window {
            image: self.out_dims(input)?,
            positions: input,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let dims = x.dims5()?;
        if dims[1] != self.in_ch {
            return Err(NnError::ShapeMismatch(format!(
                "transposed conv expects {} channels, got {}",
                self.in_ch, dims[1]
            )));
        }
        let win = self.window([dims[2], dims[3], dims[4]])?;
        let (kdim, npos) = (self.out_ch * win.kvol(), win.npos());
        let img: usize = win.image.iter().product();
        let per_in = self.in_ch * npos;
        let mut out = vec![0.0; dims[0] * self.out_ch * img];
        let mut cols = vec![0.0; kdim * npos];
        for n in 0..dims[0] {
            let xn = &x.data()[n * per_in..(n + 1) * per_in];
            gemm(kdim, self.in_ch, npos, &self.weight, true, xn, false, 0.0, &mut cols);
            let y = &mut out[n * self.out_ch * img..(n + 1) * self.out_ch * img];
            win.col2im(&cols, self.out_ch, y);
            for (c, b) in self.bias.iter().enumerate() {
                y[c * img..(c + 1) * img].iter_mut().for_each(|v| *v += *b);
            }
        }
        let o = win.image;
        Ok(Tensor::with_dims5(x.shape().len(), [dims[0], self.out_ch, o[0], o[1], o[2]], out))
    }

    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        grads: Option<(&mut [f64], &mut [f64])>,
        need_dx: bool,
    ) -> Result<Option<Tensor>, NnError> {
        let dims = x.dims5()?;
        let win = self.window([dims[2], dims[3], dims[4]])?;
        let (kdim, npos) = (self.out_ch * win.kvol(), win.npos());
        let img: usize = win.image.iter().product();
        let per_in = self.in_ch * npos;
        if dy.len() != dims[0] * self.out_ch * img {
            return Err(NnError::ShapeMismatch(
                "transposed conv output gradient has wrong size".into(),
            ));
        }
        let mut dx = need_dx.then(|| vec![0.0; x.len()]);
        let mut grads = grads;
        for n in 0..dims[0] {
            let g = &dy.data()[n * self.out_ch * img..(n + 1) * self.out_ch * img];
            let gcols = win.im2col(g, self.out_ch);
            if let Some((gw, gb)) = grads.as_mut() {
                let xn = &x.data()[n * per_in..(n + 1) * per_in];
                gemm(self.in_ch, npos, kdim, xn, false, &gcols, true, 1.0, gw);
                for c in 0..self.out_ch {
                    gb[c] += g[c * img..(c + 1) * img].iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let out = &mut dx[n * per_in..(n + 1) * per_in];
                gemm(self.in_ch, kdim, npos, &self.weight, false, &gcols, false, 0.0, out);
            }
        }
        Ok(dx.map(|d| Tensor::with_dims5(x.shape().len(), dims, d)))
    }
}

/// Non-overlapping max pooling (stride equals kernel). Trailing cells that do
/// not fill a window are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool {
    pub kernel: [usize; 3],
}

impl MaxPool {
    pub fn out_dims(&self, input: [usize; 3]) -> Result<[usize; 3], NnError> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = input[a] / self.kernel[a];
            if out[a] == 0 {
                return Err(NnError::ShapeMismatch(format!(
                    "pool kernel {:?} larger than input {:?}",
                    self.kernel, input
                )));
            }
        }
        Ok(out)
    }

    /// Returns the pooled tensor and, per output cell, the flat input index
    /// of the selected maximum. Ties go to the lowest index.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
        let dims = x.dims5()?;
        let [d, h, w] = [dims[2], dims[3], dims[4]];
        let o = self.out_dims([d, h, w])?;
        let [kd, kh, kw] = self.kernel;
        let planes = dims[0] * dims[1];
        let mut out = Vec::with_capacity(planes * o.iter().product::<usize>());
        let mut arg = Vec::with_capacity(out.capacity());
        let data = x.data();
        for p in 0..planes {
            let base = p * d * h * w;
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let i = base
                                        + ((oz * kd + a) * h + oy * kh + b) * w
                                        + ox * kw
                                        + c;
                                    let v = data[i];
                                    if v > best || best_i == usize::MAX || (v == best && i < best_i) {
                                        best = v;
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_i);
                    }
                }
            }
        }
        Ok((Tensor::with_dims5(x.shape().len(), [dims[0], dims[1], o[0], o[1], o[2]], out), arg))
    }

    pub fn backward(x: &Tensor, argmax: &[usize], dy: &Tensor) -> Tensor {
        let mut dx = vec![0.0; x.len()];
        for (&i, &g) in argmax.iter().zip(dy.data()) {
            dx[i] += g;
        }
        Tensor::new(x.shape().to_vec(), dx).expect("same shape as input")
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn clamp01(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn clamp01_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 && v < 1.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Copies the low corner of every `src` plane into a `dst`-shaped plane,
/// zero-filling or truncating along each spatial axis.
fn copy_corner(x: &Tensor, dims: [usize; 3]) -> Result<Tensor, NnError> {
    let s = x.dims5()?;
    let src = [s[2], s[3], s[4]];
    let planes = s[0] * s[1];
    let (nsrc, ndst) = (src.iter().product::<usize>(), dims.iter().product::<usize>());
    let mut out = vec![0.0; planes * ndst];
    let common = [src[0].min(dims[0]), src[1].min(dims[1]), src[2].min(dims[2])];
    for p in 0..planes {
        for z in 0..common[0] {
            for y in 0..common[1] {
                let si = p * nsrc + (z * src[1] + y) * src[2];
                let di = p * ndst + (z * dims[1] + y) * dims[2];
                out[di..di + common[2]].copy_from_slice(&x.data()[si..si + common[2]]);
            }
        }
    }
    Ok(Tensor::with_dims5(x.shape().len(), [s[0], s[1], dims[0], dims[1], dims[2]], out))
}

/// Zero-pads at the high end of each spatial axis up to `dims`.
pub fn pad_to(x: &Tensor, dims: [usize; 3]) -> Result<Tensor, NnError> {
    let s = x.dims5()?;
    if (0..3).any(|a| dims[a] < s[2 + a]) {
        return Err(NnError::ShapeMismatch(format!("cannot pad {:?} to {dims:?}", x.shape())));
    }
    copy_corner(x, dims)
}

/// Keeps the low corner of each spatial axis.
pub fn crop_to(x: &Tensor, dims: [usize; 3]) -> Result<Tensor, NnError> {
    let s = x.dims5()?;
    if (0..3).any(|a| dims[a] > s[2 + a]) {
        return Err(NnError::ShapeMismatch(format!("cannot crop {:?} to {dims:?}", x.shape())));
    }
    copy_corner(x, dims)
}

/// Per-channel resampling to new spatial extents.
pub fn rescale_to(x: &Tensor, dims: [usize; 3]) -> Result<Tensor, NnError> {
    let s = x.dims5()?;
    let src = [s[2], s[3], s[4]];
    let n: usize = src.iter().product();
    let mut out = Vec::with_capacity(s[0] * s[1] * dims.iter().product::<usize>());
    for plane in x.data().chunks(n) {
        out.extend(resample::resample(plane, src, dims));
    }
    Ok(Tensor::with_dims5(x.shape().len(), [s[0], s[1], dims[0], dims[1], dims[2]], out))
}

pub fn rescale_backward(x: &Tensor, dy: &Tensor, dims: [usize; 3]) -> Result<Tensor, NnError> {
    let s = x.dims5()?;
    let src = [s[2], s[3], s[4]];
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(x.len());
    for plane in dy.data().chunks(n) {
        out.extend(resample::resample_adjoint(plane, src, dims));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Downsampling that keeps the meaning of encoded problem channels
/// `[density, constraints.., forces..]`: density is area-averaged,
/// constraint indicators take the max over covered cells and forces are
/// summed so the total load is preserved. Only used as a network front end,
/// so it has no backward pass.
pub fn encoded_rescale(x: &Tensor, dims: [usize; 3]) -> Result<Tensor, NnError> {
    let s = x.dims5()?;
    let channels = s[1];
    if channels % 2 == 0 {
        return Err(NnError::ShapeMismatch(format!(
            "encoded input needs 1 + 2*rank channels, got {channels}"
        )));
    }
    let rank = (channels - 1) / 2;
    let src = [s[2], s[3], s[4]];
    let n: usize = src.iter().product();
    let m: usize = dims.iter().product();
    let volume_ratio = n as f64 / m as f64;
    let mut out = Vec::with_capacity(s[0] * channels * m);
    for (i, plane) in x.data().chunks(n).enumerate() {
        let c = i % channels;
        if c == 0 {
            out.extend(resample::resample(plane, src, dims));
        } else if c <= rank {
            out.extend(max_resample(plane, src, dims));
        } else {
            out.extend(resample::resample(plane, src, dims).into_iter().map(|v| v * volume_ratio));
        }
    }
    Ok(Tensor::with_dims5(x.shape().len(), [s[0], channels, dims[0], dims[1], dims[2]], out))
}

/// Separable max over the cells each target cell overlaps.
fn max_resample(values: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let mut cur = values.to_vec();
    let mut shape = from;
    for axis in (0..3).rev() {
        if shape[axis] == to[axis] {
            continue;
        }
        let (old, new) = (shape[axis], to[axis]);
        let op = resample::axis_operator(old, new);
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut next = vec![f64::NEG_INFINITY; outer * new * inner];
        for o in 0..outer {
            for r in 0..new {
                for c in (0..old).filter(|&c| op[r * old + c] > 0.0) {
                    let src = (o * old + c) * inner;
                    let dst = (o * new + r) * inner;
                    for i in 0..inner {
                        next[dst + i] = next[dst + i].max(cur[src + i]);
                    }
                }
            }
        }
        cur = next;
        shape[axis] = new;
    }
    cur
}
