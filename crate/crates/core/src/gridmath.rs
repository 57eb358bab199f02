//! Dense 2D grid arithmetic.
//!
//! Score maps, label maps and densities all live on a uniform row-major grid
//! ([`Grid2D`]). Multi-channel inputs are [`FeatureMap`]s and the linear
//! filters applied to them are [`Kernel2D`]s. The "convolution" used
//! throughout is a same-padded cross-correlation with a zero border, so the
//! score grid aligns cell-for-cell with the feature grid.

use crate::error::{dim_err, domain_err, Error, Result};

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        domain_err(format!("{what} contains non-finite values"))
    }
}

/// Row-major 2D field of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return dim_err(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            ));
        }
        check_finite(&values, "grid")?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Builds a grid by evaluating `f(row, col)` at every cell.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub(crate) fn from_raw(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dot(&self, other: &Grid2D) -> Result<f64> {
        self.same_shape(other)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2D {
        Grid2D::from_raw(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scaled(&self, factor: f64) -> Grid2D {
        self.map(|v| v * factor)
    }

    /// Row-major index of the largest value; the first one wins on ties.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| (i / self.width, i % self.width))
    }

    pub(crate) fn same_shape(&self, other: &Grid2D) -> Result<()> {
        if self.shape() != other.shape() {
            return dim_err(format!(
                "grid shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }
}

/// Multi-channel convolution filter, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Kernel2D {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height % 2 == 0 || width % 2 == 0 {
            return dim_err(format!("kernel spatial size {height}x{width} must be odd"));
        }
        if values.len() != channels * height * width {
            return dim_err(format!(
                "kernel {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            ));
        }
        check_finite(&values, "kernel")?;
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn dot(&self, other: &Kernel2D) -> Result<f64> {
        self.same_shape(other)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn scaled(&self, factor: f64) -> Kernel2D {
        Kernel2D {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Kernel2D) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_shape(&self, other: &Kernel2D) -> Result<()> {
        if self.shape() != other.shape() {
            return dim_err(format!(
                "kernel shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }
}

/// Multi-channel input to the convolution, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return dim_err(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            ));
        }
        check_finite(&values, "feature map")?;
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        self.values[(channel * self.height + row) * self.width + col] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    /// Extracts a `height x width` window whose top-left cell sits at
    /// `(top, left)` in this map; cells outside the map read as zero.
    pub fn crop(&self, top: isize, left: isize, height: usize, width: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for r in 0..height {
                let sr = top + r as isize;
                if sr < 0 || sr >= self.height as isize {
                    continue;
                }
                for col in 0..width {
                    let sc = left + col as isize;
                    if sc < 0 || sc >= self.width as isize {
                        continue;
                    }
                    out.set(c, r, col, self.get(c, sr as usize, sc as usize));
                }
            }
        }
        out
    }

    /// Mirror image along the column axis.
    pub fn flip_horizontal(&self) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for r in 0..self.height {
                for col in 0..self.width {
                    out.set(c, r, self.width - 1 - col, self.get(c, r, col));
                }
            }
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_conv_shapes(z: &FeatureMap, channels: usize, kh: usize, kw: usize) -> Result<()> {
    if z.channels != channels {
        return dim_err(format!(
            "feature map has {} channels, kernel has {channels}",
            z.channels
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return dim_err(format!("kernel spatial size {kh}x{kw} must be odd"));
    }
    if kh > z.height || kw > z.width {
        return dim_err(format!(
            "kernel {kh}x{kw} does not fit inside feature map {}x{}",
            z.height, z.width
        ));
    }
    Ok(())
}

/// Valid index range `[lo, hi)` of output positions `y` such that `y + offset`
/// lies inside `0..len`.
fn overlap(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Same-padded cross-correlation of `z` with `w`:
/// `out(y, x) = sum_c sum_{dy,dx} w[c, dy, dx] * z[c, y + dy - rh, x + dx - rw]`
/// with zeros outside `z`.
pub fn conv_apply(z: &FeatureMap, w: &Kernel2D) -> Result<Grid2D> {
    check_conv_shapes(z, w.channels, w.height, w.width)?;
    let (h, wd) = (z.height, z.width);
    let (rh, rw) = ((w.height / 2) as isize, (w.width / 2) as isize);
    let mut out = vec![0.0; h * wd];
    for c in 0..z.channels {
        let zc = z.channel(c);
        let wc = w.channel(c);
        for dy in 0..w.height {
            let oy = dy as isize - rh;
            let (y0, y1) = overlap(h, oy);
            for dx in 0..w.width {
                let ox = dx as isize - rw;
                let (x0, x1) = overlap(wd, ox);
                let coef = wc[dy * w.width + dx];
                for y in y0..y1 {
                    let src = (y as isize + oy) as usize * wd;
                    let orow = &mut out[y * wd + x0..y * wd + x1];
                    let zrow = &zc[(src as isize + x0 as isize + ox) as usize
                        ..(src as isize + x1 as isize + ox) as usize];
                    for (o, &zv) in orow.iter_mut().zip(zrow) {
                        *o += coef * zv;
                    }
                }
            }
        }
    }
    Ok(Grid2D::from_raw(h, wd, out))
}

/// Transpose of `w -> conv_apply(z, w)` applied to `u`, i.e. the kernel `k`
/// with `<conv_apply(z, w), u> == <w, k>` for every `w`.
pub fn conv_adjoint(z: &FeatureMap, u: &Grid2D, kernel_height: usize, kernel_width: usize) -> Result<Kernel2D> {
    check_conv_shapes(z, z.channels, kernel_height, kernel_width)?;
    if u.shape() != (z.height, z.width) {
        return dim_err(format!(
            "adjoint input {:?} must match feature map size {}x{}",
            u.shape(),
            z.height,
            z.width
        ));
    }
    let (h, wd) = (z.height, z.width);
    let (rh, rw) = ((kernel_height / 2) as isize, (kernel_width / 2) as isize);
    let mut k = vec![0.0; z.channels * kernel_height * kernel_width];
    for c in 0..z.channels {
        let zc = z.channel(c);
        for dy in 0..kernel_height {
            let oy = dy as isize - rh;
            let (y0, y1) = overlap(h, oy);
            for dx in 0..kernel_width {
                let ox = dx as isize - rw;
                let (x0, x1) = overlap(wd, ox);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let src = (y as isize + oy) as usize * wd;
                    let urow = &u.values[y * wd + x0..y * wd + x1];
                    let zrow = &zc[(src as isize + x0 as isize + ox) as usize
                        ..(src as isize + x1 as isize + ox) as usize];
                    acc += dot(urow, zrow);
                }
                k[(c * kernel_height + dy) * kernel_width + dx] = acc;
            }
        }
    }
    Ok(Kernel2D {
        channels: z.channels,
        height: kernel_height,
        width: kernel_width,
        values: k,
    })
}

/// Max-shifted `log(sum_i exp(v_i))`. Returns `-inf` for an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log(A * sum_k exp(g_k))`, stable for arbitrary score magnitudes.
pub fn log_sum_exp(g: &Grid2D, cell_area: f64) -> Result<f64> {
    if g.is_empty() {
        return domain_err("log-sum-exp of an empty grid");
    }
    if !(cell_area > 0.0) || !cell_area.is_finite() {
        return domain_err(format!("cell area must be positive, got {cell_area}"));
    }
    Ok(cell_area.ln() + logsumexp(&g.values))
}

/// Normalized exponentials of a slice, max-shifted.
pub fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Spatial SoftMax: `exp(g_k) / sum_l exp(g_l)`.
pub fn softmax(g: &Grid2D) -> Grid2D {
    Grid2D::from_raw(g.height, g.width, softmax_slice(&g.values))
}

/// Formats `x` with `digits` significant digits, choosing fixed or
/// exponent notation the way C's `%g` does.
pub fn format_significant(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent formatting");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_fraction(mantissa), exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Text dump: a `"H W"` header line, then `H` lines of `W` space-separated
/// values with 9 significant digits.
pub fn write_grid_dump(g: &Grid2D) -> String {
    let mut out = format!("{} {}\n", g.height, g.width);
    for r in 0..g.height {
        let row: Vec<String> = (0..g.width)
            .map(|c| format_significant(g.get(r, c), 9))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_grid_dump(text: &str) -> Result<Grid2D> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("missing header line".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("bad header {header:?}: {e}"))))
        .collect::<Result<_>>()?;
    let [h, w] = dims[..] else {
        return Err(Error::Parse(format!("header must hold two sizes, got {header:?}")));
    };
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing row {r}")))?;
        let row: Vec<f64> = line
            .split(' ')
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("row {r}: {e}"))))
            .collect::<Result<_>>()?;
        if row.len() != w {
            return Err(Error::Parse(format!("row {r} has {} values, expected {w}", row.len())));
        }
        values.extend(row);
    }
    Grid2D::new(h, w, values)
}
