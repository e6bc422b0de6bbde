//! Parallel-beam Radon transform and inverse reconstruction (filtered
//! back-projection and SART).
//!
//! Geometry convention (shared with the measurement simulator):
//!
//! ```text
//!            detector axis d(theta) = ( cos t, sin t)
//!            ray direction r(theta) = (-sin t, cos t)
//!
//!        y ^        rays at theta = 0 run along +y (column sums),
//!          |        angles grow counterclockwise, rotation center is
//!          +--> x   the image center ((W-1)/2, (H-1)/2).
//! ```
//!
//! Sample points are `center + u*d + t*r`; both the forward transform and
//! the back-projection interpolate bilinearly. Detector spacing equals the
//! pixel pitch, with one bin per image column.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::par_map;
use rustfft::{num_complex::Complex, FftPlanner};

#[derive(Clone, Debug)]
pub struct Sinogram {
    /// [A, D]: one detector row per angle.
    pub data: Tensor<f64>,
    /// Degrees, strictly increasing within [0, 180).
    pub angles_deg: Vec<f64>,
    pub pixel_pitch_mm: f64,
}

impl Sinogram {
    pub fn new(data: Tensor<f64>, angles_deg: Vec<f64>, pixel_pitch_mm: f64) -> Result<Self> {
        if data.shape().len() != 2 || data.shape()[0] != angles_deg.len() {
            return Err(Error::invalid(
                "Sinogram::new",
                format!(
                    "data shape {:?} does not match {} angles",
                    data.shape(),
                    angles_deg.len()
                ),
            ));
        }
        if angles_deg.is_empty() {
            return Err(Error::invalid("Sinogram::new", "empty angle list"));
        }
        for w in angles_deg.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("Sinogram::new", "angles must be strictly increasing"));
            }
        }
        if angles_deg[0] < 0.0 || *angles_deg.last().unwrap() >= 180.0 {
            return Err(Error::invalid("Sinogram::new", "angles must lie in [0, 180)"));
        }
        Ok(Sinogram {
            data,
            angles_deg,
            pixel_pitch_mm,
        })
    }

    pub fn num_angles(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn num_bins(&self) -> usize {
        self.data.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterWindow {
    None,
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMethod {
    Fbp,
    Sart,
}

/// Reconstructed volume: restored slices stacked along the vertical axis.
#[derive(Clone, Debug)]
pub struct Volume {
    /// [Z, H, W] grid of reconstructed intensities.
    pub grid: Tensor<f64>,
    pub voxel_pitch_mm: f64,
}

#[inline]
fn bilinear(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    // zero outside the grid
    if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        let yy = y0 + dy;
        if yy < 0 || yy >= h as isize || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let xx = x0 + dx;
            if xx < 0 || xx >= w as isize || wx == 0.0 {
                continue;
            }
            acc += img[yy as usize * w + xx as usize] * wy * wx;
        }
    }
    acc
}

/// Number of samples along each ray; parity matched to the image height so
/// that at 0 degrees samples land exactly on pixel rows.
fn ray_steps(n: usize) -> usize {
    let mut steps = ((n as f64) * std::f64::consts::SQRT_2).ceil() as usize + 1;
    if steps % 2 != n % 2 {
        steps += 1;
    }
    steps
}

/// One projection row: line integrals of `slice` at `theta` degrees.
pub fn project_slice(slice: &Tensor<f64>, theta_deg: f64) -> Vec<f64> {
    let h = slice.shape()[0];
    let w = slice.shape()[1];
    let img = slice.data();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let theta = theta_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let steps = ray_steps(h.max(w));
    let t0 = -((steps - 1) as f64) / 2.0;
    (0..w)
        .map(|i| {
            let u = i as f64 - (w as f64 - 1.0) / 2.0;
            let mut acc = 0.0;
            for k in 0..steps {
                let t = t0 + k as f64;
                let x = cx + u * cos_t - t * sin_t;
                let y = cy + u * sin_t + t * cos_t;
                acc += bilinear(img, h, w, x, y);
            }
            acc
        })
        .collect()
}

/// Parallel-beam Radon transform of a square slice.
pub fn radon(slice: &Tensor<f64>, angles_deg: &[f64], pixel_pitch_mm: f64) -> Result<Sinogram> {
    if slice.shape().len() != 2 || slice.shape()[0] != slice.shape()[1] {
        return Err(Error::invalid(
            "radon",
            format!("expected a square slice, got {:?}", slice.shape()),
        ));
    }
    if angles_deg.is_empty() {
        return Err(Error::invalid("radon", "empty angle list"));
    }
    let rows = par_map(angles_deg.len(), |a| project_slice(slice, angles_deg[a]));
    let d = slice.shape()[1];
    let data = Tensor::new(vec![angles_deg.len(), d], rows.into_iter().flatten().collect())?;
    Sinogram::new(data, angles_deg.to_vec(), pixel_pitch_mm)
}

/// Discrete Ram-Lak convolution kernel h[n] (Kak & Slaney):
/// h[0] = 1/4, h[n] = -1/(pi n)^2 for odd n, 0 for even n.
pub fn ramlak_kernel(half_len: usize) -> Vec<f64> {
    let mut h = vec![0.0; 2 * half_len + 1];
    h[half_len] = 0.25;
    for n in (1..=half_len).step_by(2) {
        let v = -1.0 / (std::f64::consts::PI * n as f64).powi(2);
        h[half_len + n] = v;
        h[half_len - n] = v;
    }
    h
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p *= 2;
    }
    p
}

/// Frequency response of the ramp filter on a padded grid, built from the
/// real-space Ram-Lak kernel so the DC term is handled exactly.
fn ramp_response(padded: usize, window: FilterWindow) -> Vec<f64> {
    let mut kern = vec![Complex::new(0.0, 0.0); padded];
    kern[0] = Complex::new(0.25, 0.0);
    let mut n = 1usize;
    while n < padded / 2 {
        if n % 2 == 1 {
            let v = -1.0 / (std::f64::consts::PI * n as f64).powi(2);
            kern[n] = Complex::new(v, 0.0);
            kern[padded - n] = Complex::new(v, 0.0);
        }
        n += 1;
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(padded);
    fft.process(&mut kern);
    let mut resp: Vec<f64> = kern.iter().map(|c| 2.0 * c.re).collect();
    if window == FilterWindow::Hann {
        for (i, r) in resp.iter_mut().enumerate() {
            // frequency index folded to [0, padded/2]
            let k = i.min(padded - i) as f64;
            let nu = k / (padded as f64 / 2.0); // 0..1 of Nyquist
            *r *= 0.5 * (1.0 + (std::f64::consts::PI * nu).cos());
        }
    }
    resp
}

/// Ramp-filter every projection row (frequency domain, zero-padded to the
/// next power of two >= 2D).
pub fn ramp_filter(sino: &Sinogram, window: FilterWindow) -> Result<Sinogram> {
    let d = sino.num_bins();
    if d < 8 {
        return Err(Error::invalid("ramp_filter", format!("need >= 8 bins, got {}", d)));
    }
    let padded = next_pow2(2 * d);
    let resp = ramp_response(padded, window);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    let a = sino.num_angles();
    let rows = par_map(a, |ai| {
        let mut buf = vec![Complex::new(0.0, 0.0); padded];
        for i in 0..d {
            buf[i] = Complex::new(sino.data.at2(ai, i), 0.0);
        }
        fwd.process(&mut buf);
        for (b, r) in buf.iter_mut().zip(resp.iter()) {
            *b *= *r;
        }
        inv.process(&mut buf);
        let scale = 1.0 / padded as f64;
        buf[..d].iter().map(|c| c.re * scale).collect::<Vec<f64>>()
    });
    let data = Tensor::new(vec![a, d], rows.into_iter().flatten().collect())?;
    Sinogram::new(data, sino.angles_deg.clone(), sino.pixel_pitch_mm)
}

/// Filtered back-projection onto a D x D grid.
pub fn fbp(sino: &Sinogram, window: FilterWindow) -> Result<Tensor<f64>> {
    let filtered = ramp_filter(sino, window)?;
    let d = sino.num_bins();
    let a = sino.num_angles();
    let center = (d as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = sino
        .angles_deg
        .iter()
        .map(|t| t.to_radians().sin_cos())
        .collect();
    let scale = std::f64::consts::PI / (2.0 * a as f64);
    let rows = par_map(d, |y| {
        let mut row = vec![0.0; d];
        let yc = y as f64 - center;
        for (x, out) in row.iter_mut().enumerate() {
            let xc = x as f64 - center;
            let mut acc = 0.0;
            for (ai, &(sin_t, cos_t)) in trig.iter().enumerate() {
                let u = xc * cos_t + yc * sin_t + center;
                if u <= -1.0 || u >= d as f64 {
                    continue;
                }
                let u0 = u.floor();
                let f = u - u0;
                let i0 = u0 as isize;
                let mut v = 0.0;
                if i0 >= 0 && (i0 as usize) < d {
                    v += filtered.data.at2(ai, i0 as usize) * (1.0 - f);
                }
                if i0 + 1 >= 0 && ((i0 + 1) as usize) < d {
                    v += filtered.data.at2(ai, (i0 + 1) as usize) * f;
                }
                acc += v;
            }
            *out = acc * scale;
        }
        row
    });
    Tensor::new(vec![d, d], rows.into_iter().flatten().collect())
}

/// Adjoint of [`project_slice`]: scatter one detector row back along its rays.
fn backproject_row(acc: &mut [f64], h: usize, w: usize, theta_deg: f64, values: &[f64]) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let theta = theta_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let steps = ray_steps(h.max(w));
    let t0 = -((steps - 1) as f64) / 2.0;
    for (i, &val) in values.iter().enumerate() {
        if val == 0.0 {
            continue;
        }
        let u = i as f64 - (w as f64 - 1.0) / 2.0;
        for k in 0..steps {
            let t = t0 + k as f64;
            let x = cx + u * cos_t - t * sin_t;
            let y = cy + u * sin_t + t * cos_t;
            if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
                continue;
            }
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                let yy = y0 + dy;
                if yy < 0 || yy >= h as isize || wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let xx = x0 + dx;
                    if xx < 0 || xx >= w as isize || wx == 0.0 {
                        continue;
                    }
                    acc[yy as usize * w + xx as usize] += val * wy * wx;
                }
            }
        }
    }
}

/// Simultaneous algebraic reconstruction: per-angle sweeps of row-normalized
/// residual back-projection, negatives clamped to zero after each sweep.
pub fn sart(sino: &Sinogram, iters: usize, relax: f64) -> Result<Tensor<f64>> {
    if !(relax > 0.0 && relax <= 1.0) {
        return Err(Error::invalid("sart", "relax must be in (0, 1]"));
    }
    let d = sino.num_bins();
    sart_from(sino, Tensor::zeros(&[d, d]), iters, relax)
}

/// Sinogram residual norm ||A x - b||_2, used to monitor SART convergence.
pub fn sinogram_residual(x: &Tensor<f64>, sino: &Sinogram) -> f64 {
    let rows = par_map(sino.num_angles(), |ai| project_slice(x, sino.angles_deg[ai]));
    let mut acc = 0.0;
    for (ai, row) in rows.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            let r = v - sino.data.at2(ai, i);
            acc += r * r;
        }
    }
    acc.sqrt()
}

/// Assemble restored per-angle views into a 3D volume: image row r across all
/// views forms the sinogram of horizontal slice r.
pub fn reconstruct_volume(
    views: &[Tensor<f64>],
    angles_deg: &[f64],
    method: ReconMethod,
    pixel_pitch_mm: f64,
) -> Result<Volume> {
    if views.is_empty() || views.len() != angles_deg.len() {
        return Err(Error::invalid(
            "reconstruct_volume",
            format!("{} views vs {} angles", views.len(), angles_deg.len()),
        ));
    }
    let shape = views[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::invalid(
            "reconstruct_volume",
            format!("views must be [1,H,W], got {:?}", shape),
        ));
    }
    for (i, v) in views.iter().enumerate() {
        if v.shape() != shape {
            return Err(Error::invalid(
                "reconstruct_volume",
                format!("view {} shape {:?} != {:?}", i, v.shape(), shape),
            ));
        }
    }
    // sort by angle so permuted inputs give identical output
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by(|&a, &b| angles_deg[a].partial_cmp(&angles_deg[b]).unwrap());
    let sorted_angles: Vec<f64> = order.iter().map(|&i| angles_deg[i]).collect();
    let (h, w) = (shape[1], shape[2]);
    let slices = par_map(h, |row| -> Result<Vec<f64>> {
        let mut sino_rows = Vec::with_capacity(order.len() * w);
        for &vi in &order {
            for xx in 0..w {
                sino_rows.push(views[vi].at3(0, row, xx));
            }
        }
        let sino = Sinogram::new(
            Tensor::new(vec![order.len(), w], sino_rows)?,
            sorted_angles.clone(),
            pixel_pitch_mm,
        )?;
        let slice = match method {
            ReconMethod::Fbp => fbp(&sino, FilterWindow::None)?,
            ReconMethod::Sart => sart(&sino, 10, 0.25)?,
        };
        Ok(slice.into_data())
    });
    let mut grid = Vec::with_capacity(h * w * w);
    for s in slices {
        grid.extend(s?);
    }
    Ok(Volume {
        grid: Tensor::new(vec![h, w, w], grid)?,
        voxel_pitch_mm: pixel_pitch_mm,
    })
}

/// A filled disk test slice with value 1 inside radius r.
pub fn disk_slice(n: usize, radius: f64) -> Tensor<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    Tensor::from_fn(&[n, n], |i| {
        let y = (i / n) as f64 - c;
        let x = (i % n) as f64 - c;
        if (x * x + y * y).sqrt() <= radius {
            1.0
        } else {
            0.0
        }
    })
}


/// Run SART starting from a given image (used to monitor per-sweep residuals).
pub fn sart_from(sino: &Sinogram, mut x: Tensor<f64>, iters: usize, relax: f64) -> Result<Tensor<f64>> {
    if iters < 1 {
        return Err(Error::invalid("sart", "iters must be >= 1"));
    }
    let d = sino.num_bins();
    if x.shape() != [d, d] {
        return Err(Error::invalid("sart", format!("seed shape {:?} != [{d}, {d}]", x.shape())));
    }
    let ones = Tensor::full(&[d, d], 1.0);
    let row_sums: Vec<Vec<f64>> = par_map(sino.num_angles(), |ai| {
        project_slice(&ones, sino.angles_deg[ai])
    });
    let col_sums: Vec<Vec<f64>> = par_map(sino.num_angles(), |ai| {
        let mut acc = vec![0.0; d * d];
        backproject_row(&mut acc, d, d, sino.angles_deg[ai], &vec![1.0; d]);
        acc
    });
    for _ in 0..iters {
        for ai in 0..sino.num_angles() {
            let proj = project_slice(&x, sino.angles_deg[ai]);
            let mut resid: Vec<f64> = (0..d)
                .map(|i| {
                    let rs = row_sums[ai][i];
                    if rs > 1e-12 {
                        (sino.data.at2(ai, i) - proj[i]) / rs
                    } else {
                        0.0
                    }
                })
                .collect();
            for r in resid.iter_mut() {
                *r *= relax;
            }
            let mut update = vec![0.0; d * d];
            backproject_row(&mut update, d, d, sino.angles_deg[ai], &resid);
            let xd = x.data_mut();
            for (j, u) in update.iter().enumerate() {
                let cs = col_sums[ai][j];
                if cs > 1e-12 {
                    xd[j] += u / cs;
                }
            }
        }
        for v in x.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(x)
}
