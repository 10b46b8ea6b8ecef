//! Dense `f32` tensors, 2-D grids and the handful of array kernels the
//! pipeline needs: row softmax, average pooling, nearest upsampling,
//! resampling and matrix products.
//!
//! Layout is row-major everywhere. Images are `[height, width, channels]`.

use crate::error::{shape_err, Error, Result};

/// Row-major `f32` array with a fixed shape. Every stored value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return shape_err(format!("dimensions must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: &[usize], value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    /// Builds a rank-2 tensor from `f(row, col)`.
    pub fn from_fn2(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn2(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => shape_err(format!("expected rank-2 tensor, got shape {s:?}")),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Mean over all elements, accumulated in `f64`.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn scale(&self, s: f32) -> Result<Self> {
        Self::new(
            self.shape.clone(),
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn to_grid(&self) -> Result<Grid<f32>> {
        let (r, c) = self.dims2()?;
        Grid::new(r, c, self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Row-major 2-D grid of plain values, used for label maps and
/// per-pixel probabilities.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return shape_err(format!("grid dims must be positive, got {height}x{width}"));
        }
        if data.len() != height * width {
            return shape_err(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sub-grid with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::Bounds(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{} grid",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in row..row + height {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Self::new(height, width, data)
    }

    /// Writes `patch` into this grid with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, row: usize, col: usize, patch: &Grid<T>) -> Result<()> {
        if row + patch.height > self.height || col + patch.width > self.width {
            return Err(Error::Bounds(format!(
                "patch {}x{} at ({row},{col}) exceeds {}x{} grid",
                patch.height, patch.width, self.height, self.width
            )));
        }
        for r in 0..patch.height {
            let dst = (row + r) * self.width + col;
            self.data[dst..dst + patch.width]
                .copy_from_slice(&patch.data[r * patch.width..(r + 1) * patch.width]);
        }
        Ok(())
    }
}

impl Grid<f32> {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.height, self.width], self.data.clone())
    }
}

/// Numerically stabilized softmax over each row of a rank-2 tensor.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2()?;
    let mut out = m.data.clone();
    for r in 0..rows {
        softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![rows, cols], out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Mean pooling over non-overlapping `window x window` blocks.
pub fn avg_pool2d(m: &Tensor, window: usize) -> Result<Tensor> {
    let (rows, cols) = m.dims2()?;
    if window == 0 || rows % window != 0 || cols % window != 0 {
        return shape_err(format!(
            "{rows}x{cols} map is not divisible by pooling window {window}"
        ));
    }
    let (oh, ow) = (rows / window, cols / window);
    let mut acc = vec![0.0f64; oh * ow];
    for r in 0..rows {
        let orow = (r / window) * ow;
        for c in 0..cols {
            acc[orow + c / window] += m.data[r * cols + c] as f64;
        }
    }
    let area = (window * window) as f64;
    Tensor::new(vec![oh, ow], acc.into_iter().map(|v| (v / area) as f32).collect())
}

/// Replicates each source cell into a block so the grid reaches the target
/// dims. Targets must be integer multiples of the source dims.
pub fn upsample_nearest<T: Copy>(grid: &Grid<T>, target_h: usize, target_w: usize) -> Result<Grid<T>> {
    let (h, w) = grid.dims();
    if target_h == 0 || target_w == 0 || !target_h.is_multiple_of(h) || !target_w.is_multiple_of(w) {
        return shape_err(format!(
            "cannot upsample {h}x{w} to {target_h}x{target_w}: not an integer multiple"
        ));
    }
    let (fh, fw) = (target_h / h, target_w / w);
    let mut data = Vec::with_capacity(target_h * target_w);
    for r in 0..target_h {
        let src = &grid.data[(r / fh) * w..(r / fh + 1) * w];
        for &v in src {
            data.extend(std::iter::repeat_n(v, fw));
        }
    }
    Grid::new(target_h, target_w, data)
}

/// Nearest-sample resize to arbitrary dims (pixel-center mapping).
pub fn resize_nearest<T: Copy>(grid: &Grid<T>, target_h: usize, target_w: usize) -> Result<Grid<T>> {
    let (h, w) = grid.dims();
    let cols: Vec<usize> = (0..target_w).map(|c| (2 * c + 1) * w / (2 * target_w)).collect();
    Grid::from_fn(target_h, target_w, |r, c| {
        let sr = (2 * r + 1) * h / (2 * target_h);
        grid.get(sr, cols[c])
    })
}

/// Nearest-sample resize of an `[H, W, C]` image.
pub fn resize_image_nearest(image: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (h, w, ch) = image_dims(image)?;
    let mut data = Vec::with_capacity(target_h * target_w * ch);
    for r in 0..target_h {
        let sr = (2 * r + 1) * h / (2 * target_h);
        for c in 0..target_w {
            let sc = (2 * c + 1) * w / (2 * target_w);
            let base = (sr * w + sc) * ch;
            data.extend_from_slice(&image.data[base..base + ch]);
        }
    }
    Tensor::new(vec![target_h, target_w, ch], data)
}

/// Area-weighted (box filter) resize of an `[H, W, C]` image. Each output
/// pixel is the exact coverage-weighted mean of the source pixels it spans,
/// so the global mean is preserved.
pub fn area_resize(image: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (h, w, ch) = image_dims(image)?;
    if target_h == 0 || target_w == 0 {
        return shape_err("area resize target must be non-empty");
    }
    if (h, w) == (target_h, target_w) {
        return Ok(image.clone());
    }
    let wr = area_weights(h, target_h);
    let wc = area_weights(w, target_w);
    // rows first: [target_h, w, ch]
    let mut tmp = vec![0.0f64; target_h * w * ch];
    for (tr, taps) in wr.iter().enumerate() {
        let dst = &mut tmp[tr * w * ch..(tr + 1) * w * ch];
        for &(sr, wt) in taps {
            let src = &image.data[sr * w * ch..(sr + 1) * w * ch];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wt * s as f64;
            }
        }
    }
    let mut out = vec![0.0f32; target_h * target_w * ch];
    for tr in 0..target_h {
        for (tc, taps) in wc.iter().enumerate() {
            for k in 0..ch {
                let mut acc = 0.0f64;
                for &(sc, wt) in taps {
                    acc += wt * tmp[(tr * w + sc) * ch + k];
                }
                out[(tr * target_w + tc) * ch + k] = acc as f32;
            }
        }
    }
    Tensor::new(vec![target_h, target_w, ch], out)
}

/// For each target index, the source indices it overlaps and their weights
/// (overlap length / target cell length).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap / scale));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

/// Majority value of each `fh x fw` block; ties go to the smallest value.
pub fn block_mode(grid: &Grid<u16>, fh: usize, fw: usize) -> Result<Grid<u16>> {
    let (h, w) = grid.dims();
    if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
        return shape_err(format!("{h}x{w} grid not divisible by {fh}x{fw} blocks"));
    }
    Grid::from_fn(h / fh, w / fw, |br, bc| {
        let mut local: Vec<u16> = Vec::with_capacity(fh * fw);
        for r in br * fh..(br + 1) * fh {
            for c in bc * fw..(bc + 1) * fw {
                local.push(grid.get(r, c));
            }
        }
        local.sort_unstable();
        let mut best = (local[0], 0usize);
        let mut i = 0;
        while i < local.len() {
            let mut j = i;
            while j < local.len() && local[j] == local[i] {
                j += 1;
            }
            if j - i > best.1 {
                best = (local[i], j - i);
            }
            i = j;
        }
        best.0
    })
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return shape_err(format!("matmul inner dims differ: {m}x{k} . {k2}x{n}"));
    }
    let out = gemm(&a.data, &b.data, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] . b[k,n]` on raw row-major slices.
pub(crate) fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
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

pub(crate) fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => shape_err(format!("expected [H, W, C] image, got shape {s:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_row() {
        let m = Tensor::zeros(&[1, 4]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_two_to_one() {
        let m = Tensor::new(vec![1, 2], vec![std::f32::consts::LN_2, 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let m = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_rank3() {
        let m = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn avg_pool_examples() {
        let c = Tensor::filled(&[128, 128], 0.37).unwrap();
        let p = avg_pool2d(&c, 8).unwrap();
        assert_eq!(p.shape(), &[16, 16]);
        assert!(p.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));

        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2d(&m, 2).unwrap().data(), &[2.5]);

        let m = Tensor::zeros(&[16, 16]).unwrap();
        assert_eq!(avg_pool2d(&m, 8).unwrap().shape(), &[2, 2]);
        assert!(avg_pool2d(&Tensor::zeros(&[10, 16]).unwrap(), 8).is_err());
    }

    #[test]
    fn upsample_examples() {
        let g = Grid::filled(1, 1, 7u16).unwrap();
        let u = upsample_nearest(&g, 3, 3).unwrap();
        assert!(u.data().iter().all(|&v| v == 7));

        let g = Grid::new(2, 2, vec![1u16, 2, 3, 4]).unwrap();
        let u = upsample_nearest(&g, 4, 4).unwrap();
        assert_eq!(
            u.data(),
            &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
        );
        assert!(upsample_nearest(&g, 5, 4).is_err());
    }

    #[test]
    fn upsample_then_majority_recovers_labels() {
        let g = Grid::from_fn(400, 600, |r, c| ((r / 7 + c / 13) % 5) as u16).unwrap();
        let u = upsample_nearest(&g, 800, 1200).unwrap();
        assert_eq!(block_mode(&u, 2, 2).unwrap(), g);
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::filled(&[2, 1], 1.0).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(matmul(&a, &Tensor::identity(2).unwrap()).unwrap(), a);
        let z = Tensor::zeros(&[3, 2]).unwrap();
        assert!(matmul(&z, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matmul(&a, &z).is_err());
    }

    #[test]
    fn area_resize_identity_and_constant() {
        let img = Tensor::new(
            vec![4, 6, 3],
            (0..72).map(|i| (i as f32 * 0.013).fract()).collect(),
        )
        .unwrap();
        assert_eq!(area_resize(&img, 4, 6).unwrap(), img);
        let c = Tensor::filled(&[9, 7, 3], 0.4).unwrap();
        let r = area_resize(&c, 4, 3).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn block_mode_tie_breaks_low() {
        let g = Grid::new(2, 2, vec![3u16, 1, 1, 3]).unwrap();
        assert_eq!(block_mode(&g, 2, 2).unwrap().data(), &[1]);
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f32..50.0, 24)) {
            let m = Tensor::new(vec![4, 6], vals).unwrap();
            let s = softmax_rows(&m).unwrap();
            for r in 0..4 {
                let sum: f32 = s.data()[r * 6..(r + 1) * 6].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn pooling_preserves_mean(vals in proptest::collection::vec(-10.0f32..10.0, 256)) {
            let m = Tensor::new(vec![16, 16], vals).unwrap();
            for w in [2, 4, 8, 16] {
                let p = avg_pool2d(&m, w).unwrap();
                prop_assert!((p.mean() - m.mean()).abs() < 1e-6);
            }
        }

        #[test]
        fn upsample_then_pool_is_identity(vals in proptest::collection::vec(0u16..9, 12), f in 1usize..5) {
            let g = Grid::new(3, 4, vals).unwrap();
            let u = upsample_nearest(&g, 3 * f, 4 * f).unwrap();
            prop_assert_eq!(block_mode(&u, f, f).unwrap(), g.clone());
            let t = g.map(|v| v as f32).to_tensor().unwrap();
            let ut = upsample_nearest(&g.map(|v| v as f32), 3 * f, 4 * f).unwrap().to_tensor().unwrap();
            prop_assert_eq!(avg_pool2d(&ut, f).unwrap(), t);
        }
    }
}
