//! Pixel-level primitives: images, masks, DSSIM maps, summed-area tables and
//! the two blending operators.
//!
//! Pixel values live in `[0, 1]` as `f64`. Images are stored row-major,
//! interleaved RGB. Coordinates follow the usual raster convention: `x` is
//! the column, `y` is the row.

use std::path::Path;

use crate::{Error, Result};

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 8;

/// SSIM window side and standard deviation.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Residual (max-norm) the Poisson solver iterates down to.
pub const POISSON_TOLERANCE: f64 = 1e-6;
pub const POISSON_MAX_ITERATIONS: usize = 10_000;

/// Dense three-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", height * width * CHANNELS),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from a per-pixel function; values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(height >= MIN_SIDE && width >= MIN_SIDE, "image too small");
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| clamp01(*v)));
            }
        }
        Self { height, width, data }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(height, width, |_, _| [value; 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_error(self.height, self.width, other.height, other.width))
        }
    }

    /// Channel mean per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_shape(other)?;
        let total: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(total / self.data.len() as f64)
    }

    /// Snaps every value onto the 8-bit grid used at file boundaries.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f64::from(to_u8(*v)) / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let data = img.as_raw().iter().map(|b| f64::from(*b) / 255.0).collect();
        Image::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Encoded PNG bytes.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Sub-image `[y0, y0 + h) x [x0, x0 + w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid("crop outside image"));
        }
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Image::new(h, w, data)
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Image::from_fn(height, width, |y, x| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            self.sample_bilinear(fy, fx)
        })
    }

    /// Bilinear sample at fractional `(y, x)`, clamped to the image.
    pub fn sample_bilinear(&self, fy: f64, fx: f64) -> [f64; 3] {
        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let fx = fx.clamp(0.0, (self.width - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let ty = fy - y0 as f64;
        let tx = fx - x0 as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.get(y0, x0, c) * (1.0 - tx) + self.get(y0, x1, c) * tx;
            let bot = self.get(y1, x0, c) * (1.0 - tx) + self.get(y1, x1, c) * tx;
            *o = top * (1.0 - ty) + bot * ty;
        }
        out
    }

    /// Separable Gaussian blur of every channel, reflected borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma, kernel_radius(sigma));
        let mut data = vec![0.0; self.data.len()];
        let mut plane = vec![0.0; self.height * self.width];
        for c in 0..CHANNELS {
            for (i, v) in plane.iter_mut().enumerate() {
                *v = self.data[i * CHANNELS + c];
            }
            let blurred = separable_filter(&plane, self.height, self.width, &kernel);
            for (i, v) in blurred.iter().enumerate() {
                data[i * CHANNELS + c] = clamp01(*v);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Single-channel real-valued plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", height * width),
                actual: format!("{} values", values.len()),
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self { height, width, values }
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

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }
}

/// Blending weights in `[0, 1]`; 1 selects the fake image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Plane);

impl Mask {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(v) = plane.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Mask(plane))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Mask(Plane::filled(height, width, value.clamp(0.0, 1.0)))
    }

    /// Binary mask that is 1 on `[y0, y0 + h) x [x0, x0 + w)`.
    pub fn rectangle(height: usize, width: usize, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Mask(Plane::from_fn(height, width, |y, x| {
            if y >= y0 && y < y0 + h && x >= x0 && x < x0 + w {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }

    pub fn is_binary(&self) -> bool {
        self.0.values.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    /// Half-open bounding box `[x0, y0, x1, y1]` of the nonzero support.
    pub fn support_bbox(&self) -> Option<[usize; 4]> {
        let mut bbox: Option<[usize; 4]> = None;
        for y in 0..self.0.height {
            for x in 0..self.0.width {
                if self.0.get(y, x) > 0.0 {
                    let b = bbox.get_or_insert([x, y, x + 1, y + 1]);
                    b[0] = b[0].min(x);
                    b[1] = b[1].min(y);
                    b[2] = b[2].max(x + 1);
                    b[3] = b[3].max(y + 1);
                }
            }
        }
        bbox
    }
}

/// Per-pixel structural dissimilarity between two images.
#[derive(Debug, Clone, PartialEq)]
pub struct DssimMap(Plane);

impl DssimMap {
    pub fn from_plane(plane: Plane) -> Self {
        DssimMap(plane)
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }

    pub fn max(&self) -> f64 {
        self.0.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Normalised 1-D Gaussian of half-width `radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil().max(1.0) as usize
}

/// Mirror index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Horizontal then vertical pass of a symmetric kernel, reflected borders.
pub fn separable_filter(src: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * row[reflect(x as isize + k as isize - r, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for (k, w) in kernel.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - r, height);
            let src_row = &tmp[sy * width..(sy + 1) * width];
            let dst_row = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += w * s;
            }
        }
    }
    out
}

/// Structural dissimilarity `(1 - SSIM) / 2` on the luminance channel with
/// an 11x11 Gaussian window (sigma 1.5) and reflected borders.
pub fn dssim_map(a: &Image, b: &Image) -> Result<DssimMap> {
    a.check_shape(b)?;
    let (h, w) = (a.height, a.width);
    let la = a.luminance();
    let lb = b.luminance();
    let kernel = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW / 2);
    let filter = |v: &[f64]| separable_filter(v, h, w, &kernel);

    let mu_a = filter(&la);
    let mu_b = filter(&lb);
    let aa: Vec<f64> = la.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();
    let e_aa = filter(&aa);
    let e_bb = filter(&bb);
    let e_ab = filter(&ab);

    let values = (0..h * w)
        .map(|i| ssim_to_dssim(ssim_from_moments(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i])))
        .collect();
    Ok(DssimMap(Plane {
        height: h,
        width: w,
        values,
    }))
}

/// SSIM from windowed first and second moments.
#[inline]
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

#[inline]
pub fn ssim_to_dssim(ssim: f64) -> f64 {
    ((1.0 - ssim) / 2.0).clamp(0.0, 1.0)
}

/// Inclusive prefix sums with a zero guard row and column:
/// `table[(i + 1) * (w + 1) + (j + 1)] = sum of map[0..=i][0..=j]`.
#[derive(Debug, Clone)]
pub struct SummedAreaTable {
    height: usize,
    width: usize,
    table: Vec<f64>,
}

impl SummedAreaTable {
    pub fn new(plane: &Plane) -> Self {
        let (h, w) = (plane.height, plane.width);
        let stride = w + 1;
        let mut table = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row_sum = 0.0;
            for x in 0..w {
                row_sum += plane.get(y, x);
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row_sum;
            }
        }
        Self {
            height: h,
            width: w,
            table,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Sum of `map[0..rows][0..cols]`.
    #[inline]
    pub fn prefix(&self, rows: usize, cols: usize) -> f64 {
        self.table[rows * (self.width + 1) + cols]
    }

    /// Sum over `[y0, y0 + h) x [x0, x0 + w)` in four lookups.
    #[inline]
    pub fn rect_sum(&self, y0: usize, x0: usize, h: usize, w: usize) -> f64 {
        let (y1, x1) = (y0 + h, x0 + w);
        self.prefix(y1, x1) - self.prefix(y0, x1) - self.prefix(y1, x0) + self.prefix(y0, x0)
    }

    pub fn total(&self) -> f64 {
        self.prefix(self.height, self.width)
    }
}

pub fn summed_area_table(map: &DssimMap) -> SummedAreaTable {
    SummedAreaTable::new(&map.0)
}

fn check_mask(img: &Image, mask: &Mask) -> Result<()> {
    if mask.height() != img.height || mask.width() != img.width {
        return Err(shape_error(img.height, img.width, mask.height(), mask.width()));
    }
    Ok(())
}

/// `fake * M + source * (1 - M)` per pixel and channel.
pub fn alpha_blend(fake: &Image, source: &Image, mask: &Mask) -> Result<Image> {
    fake.check_shape(source)?;
    check_mask(fake, mask)?;
    let w = fake.width;
    let data = fake
        .data
        .iter()
        .zip(&source.data)
        .enumerate()
        .map(|(i, (f, s))| {
            let p = i / CHANNELS;
            let m = mask.get(p / w, p % w);
            f * m + s * (1.0 - m)
        })
        .collect();
    Ok(Image {
        height: fake.height,
        width: fake.width,
        data,
    })
}

/// Outcome of a Poisson solve, before clamping.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    /// Unclamped solution; equals `source` outside the mask.
    pub raw: Vec<f64>,
    pub iterations: usize,
    /// Max-norm residual of the linear system, worst channel.
    pub residual: f64,
}

/// Gradient-domain blend: inside the (binary, interior) mask the output has
/// the discrete Laplacian of `fake` and takes `source` values on the
/// boundary. Outside the mask the output is `source` exactly. The result is
/// clamped to `[0, 1]`.
pub fn poisson_blend(fake: &Image, source: &Image, mask: &Mask) -> Result<Image> {
    let sol = poisson_solve(fake, source, mask)?;
    Ok(Image {
        height: fake.height,
        width: fake.width,
        data: sol.raw.into_iter().map(clamp01).collect(),
    })
}

/// Conjugate-gradient solve of the guided Poisson system, per channel.
pub fn poisson_solve(fake: &Image, source: &Image, mask: &Mask) -> Result<PoissonSolution> {
    fake.check_shape(source)?;
    check_mask(fake, mask)?;
    if !mask.is_binary() {
        return Err(Error::invalid("Poisson blending needs a binary mask"));
    }
    let (h, w) = (fake.height, fake.width);
    for y in 0..h {
        for x in 0..w {
            let border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if border && mask.get(y, x) == 1.0 {
                return Err(Error::invalid("Poisson mask touches the image border"));
            }
        }
    }

    // Unknown index per masked pixel.
    let mut index = vec![usize::MAX; h * w];
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 1.0 {
                index[y * w + x] = pixels.len();
                pixels.push((y, x));
            }
        }
    }

    let mut raw = source.data.clone();
    let mut worst_residual = 0.0_f64;
    let mut total_iterations = 0;
    if pixels.is_empty() {
        return Ok(PoissonSolution {
            raw,
            iterations: 0,
            residual: 0.0,
        });
    }

    let n = pixels.len();
    // Neighbour lists: interior unknowns only.
    let neighbours: Vec<[usize; 4]> = pixels
        .iter()
        .map(|&(y, x)| [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)].map(|(ny, nx)| index[ny * w + nx]))
        .collect();
    let apply = |v: &[f64], out: &mut [f64]| {
        for (i, nb) in neighbours.iter().enumerate() {
            let mut acc = 4.0 * v[i];
            for &j in nb {
                if j != usize::MAX {
                    acc -= v[j];
                }
            }
            out[i] = acc;
        }
    };

    for c in 0..CHANNELS {
        let mut b = vec![0.0; n];
        for (i, &(y, x)) in pixels.iter().enumerate() {
            let g = fake.get(y, x, c);
            let mut rhs = 0.0;
            for (ny, nx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
                rhs += g - fake.get(ny, nx, c);
                if index[ny * w + nx] == usize::MAX {
                    rhs += source.get(ny, nx, c);
                }
            }
            b[i] = rhs;
        }

        // Start from the fake values; already close for smooth guidance.
        let mut xs: Vec<f64> = pixels.iter().map(|&(y, x)| fake.get(y, x, c)).collect();
        let mut ax = vec![0.0; n];
        apply(&xs, &mut ax);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut p = r.clone();
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        let mut ap = vec![0.0; n];
        let mut iterations = 0;
        let max_norm = |r: &[f64]| r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut residual = max_norm(&r);
        while residual > POISSON_TOLERANCE {
            if iterations >= POISSON_MAX_ITERATIONS {
                return Err(Error::NotConverged { iterations, residual });
            }
            apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            let alpha = rr / pap;
            for i in 0..n {
                xs[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_next: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_next / rr;
            rr = rr_next;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            iterations += 1;
            // Recompute the true residual now and then to avoid drift.
            if iterations % 50 == 0 {
                apply(&xs, &mut ax);
                for i in 0..n {
                    r[i] = b[i] - ax[i];
                }
            }
            residual = max_norm(&r);
        }
        total_iterations += iterations;
        apply(&xs, &mut ax);
        let true_residual = b.iter().zip(&ax).fold(0.0_f64, |m, (b, a)| m.max((b - a).abs()));
        worst_residual = worst_residual.max(true_residual);
        for (i, &(y, x)) in pixels.iter().enumerate() {
            raw[(y * w + x) * CHANNELS + c] = xs[i];
        }
    }
    Ok(PoissonSolution {
        raw,
        iterations: total_iterations,
        residual: worst_residual,
    })
}

#[inline]
pub fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// 8-bit value with round-half-up.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor().min(255.0) as u8
}

fn shape_error(h: usize, w: usize, oh: usize, ow: usize) -> Error {
    Error::ShapeMismatch {
        expected: format!("{h}x{w}"),
        actual: format!("{oh}x{ow}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    /// Direct per-pixel SSIM with the full 2-D window and reflected indices.
    fn naive_dssim(a: &Image, b: &Image) -> Vec<f64> {
        let (h, w) = (a.height(), a.width());
        let la = a.luminance();
        let lb = b.luminance();
        let r = (SSIM_WINDOW / 2) as isize;
        let g: Vec<f64> = (-r..=r)
            .map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (mut wsum, mut ma, mut mb) = (0.0, 0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wt = g[(dy + r) as usize] * g[(dx + r) as usize];
                        let yy = reflect(y as isize + dy, h);
                        let xx = reflect(x as isize + dx, w);
                        let va = la[yy * w + xx];
                        let vb = lb[yy * w + xx];
                        wsum += wt;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (ma, mb) = (ma / wsum, mb / wsum);
                let var_a = saa / wsum - ma * ma;
                let var_b = sbb / wsum - mb * mb;
                let cov = sab / wsum - ma * mb;
                let ssim = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
                out.push(((1.0 - ssim) / 2.0).clamp(0.0, 1.0));
            }
        }
        out
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn dssim_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 24, 20);
        let d = dssim_map(&a, &a).unwrap();
        assert!(d.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dssim_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let ab = dssim_map(&a, &b).unwrap();
        let ba = dssim_map(&b, &a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn dssim_matches_naive_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);
        let fast = dssim_map(&a, &b).unwrap();
        let slow = naive_dssim(&a, &b);
        let err = fast
            .values()
            .iter()
            .zip(&slow)
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err < 1e-9, "max error {err}");
        assert!(fast.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dssim_rejects_shape_mismatch() {
        let a = Image::constant(16, 16, 0.5);
        let b = Image::constant(16, 17, 0.5);
        assert!(matches!(dssim_map(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn sat_counts_ones() {
        let map = DssimMap(Plane::filled(4, 4, 1.0));
        let sat = summed_area_table(&map);
        assert_eq!(sat.prefix(4, 4), 16.0);
        assert_eq!(sat.rect_sum(0, 0, 4, 4), 16.0);
        assert_eq!(sat.rect_sum(1, 2, 2, 2), 4.0);
    }

    #[test]
    fn sat_matches_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plane = Plane::from_fn(64, 64, |_, _| rng.random_range(0..1000) as f64);
        let sat = SummedAreaTable::new(&plane);
        assert_eq!(sat.total(), plane.values().iter().sum::<f64>());
        for _ in 0..100 {
            let y0 = rng.random_range(0..64);
            let x0 = rng.random_range(0..64);
            let h = rng.random_range(1..=64 - y0);
            let w = rng.random_range(1..=64 - x0);
            let mut direct = 0.0;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    direct += plane.get(y, x);
                }
            }
            assert_eq!(sat.rect_sum(y0, x0, h, w), direct);
        }
    }

    #[test]
    fn alpha_blend_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_image(&mut rng, 12, 12);
        let s = random_image(&mut rng, 12, 12);
        assert_eq!(alpha_blend(&f, &s, &Mask::filled(12, 12, 1.0)).unwrap(), f);
        assert_eq!(alpha_blend(&f, &s, &Mask::filled(12, 12, 0.0)).unwrap(), s);
        let out = alpha_blend(
            &Image::constant(8, 8, 0.2),
            &Image::constant(8, 8, 0.6),
            &Mask::filled(8, 8, 0.5),
        )
        .unwrap();
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn alpha_blend_complementary_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_image(&mut rng, 10, 9);
        let s = random_image(&mut rng, 10, 9);
        let m = Mask::new(Plane::from_fn(10, 9, |_, _| rng.random())).unwrap();
        let fs = alpha_blend(&f, &s, &m).unwrap();
        let sf = alpha_blend(&s, &f, &m).unwrap();
        for i in 0..f.data().len() {
            let lhs = fs.data()[i] + sf.data()[i];
            let rhs = f.data()[i] + s.data()[i];
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn poisson_constant_images() {
        let f = Image::constant(16, 16, 0.3);
        let s = Image::constant(16, 16, 0.3);
        let m = Mask::rectangle(16, 16, 4, 4, 8, 8);
        let out = poisson_blend(&f, &s, &m).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn poisson_empty_mask_is_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_image(&mut rng, 16, 16);
        let s = random_image(&mut rng, 16, 16);
        let out = poisson_blend(&f, &s, &Mask::filled(16, 16, 0.0)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn poisson_laplacian_matches_guidance() {
        // Smooth fixtures keep the solution inside [0, 1], so clamping is inert.
        let f = Image::from_fn(16, 16, |y, x| {
            let t = (y as f64 * 0.4).sin() * 0.1 + (x as f64 * 0.3).cos() * 0.1;
            [0.5 + t, 0.45 - t, 0.5 + 0.5 * t]
        });
        let s = Image::from_fn(16, 16, |y, x| [0.4 + 0.01 * x as f64, 0.5, 0.3 + 0.01 * y as f64]);
        let m = Mask::rectangle(16, 16, 4, 4, 8, 8);
        let sol = poisson_solve(&f, &s, &m).unwrap();
        assert!(sol.residual <= 1e-3);
        let out = poisson_blend(&f, &s, &m).unwrap();
        let lap = |img: &Image, y: usize, x: usize, c: usize| {
            4.0 * img.get(y, x, c)
                - img.get(y - 1, x, c)
                - img.get(y + 1, x, c)
                - img.get(y, x - 1, c)
                - img.get(y, x + 1, c)
        };
        let mut worst = 0.0_f64;
        for y in 4..12 {
            for x in 4..12 {
                for c in 0..3 {
                    worst = worst.max((lap(&out, y, x, c) - lap(&f, y, x, c)).abs());
                }
            }
        }
        assert!(worst <= 1e-3, "laplacian residual {worst}");
        for y in 0..16 {
            for x in 0..16 {
                if m.get(y, x) == 0.0 {
                    assert_eq!(out.pixel(y, x), s.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn poisson_rejects_border_and_soft_masks() {
        let f = Image::constant(16, 16, 0.3);
        let border = Mask::rectangle(16, 16, 0, 4, 8, 8);
        assert!(matches!(poisson_blend(&f, &f, &border), Err(Error::InvalidInput(_))));
        let soft = Mask::filled(16, 16, 0.5);
        assert!(poisson_blend(&f, &f, &soft).is_err());
    }

    #[test]
    fn rgb8_round_half_up() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.5 / 255.0), 1);
        assert_eq!(to_u8(0.49 / 255.0), 0);
        let img = Image::from_fn(8, 8, |y, x| [y as f64 / 7.0, x as f64 / 7.0, 0.5]);
        let back = Image::from_rgb8(&img.to_rgb8()).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn mask_support_bbox() {
        let m = Mask::rectangle(20, 20, 3, 5, 4, 6);
        assert_eq!(m.support_bbox(), Some([5, 3, 11, 7]));
        assert_eq!(Mask::filled(10, 10, 0.0).support_bbox(), None);
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(8, 8, vec![1.5; 192]).is_err());
        assert!(Image::new(4, 8, vec![0.5; 96]).is_err());
    }
}
