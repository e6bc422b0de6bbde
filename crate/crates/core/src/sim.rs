//! Synthetic THz time-domain measurement model.
//!
//! A differentiated-Gaussian reference pulse traverses a voxelized phantom.
//! Per detector pixel the transmitted trace is the reference delayed by
//! Δt = ∫(n−1) dl / c and scaled by exp(−∫α dl) (Beer–Lambert on the field),
//! optionally with white noise at a target SNR. Measurement features follow
//! standard THz-CT practice: the Time-max peak and per-band complex
//! coefficients (relative amplitude and wrapped relative phase) at 12
//! selected frequencies. `degrade` assembles full multi-band projections
//! with a wavelength-proportional Gaussian blur standing in for the
//! diffraction limit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::tensor::Tensor;
use crate::tomo::project_slice;
use crate::util::{derive_seed, par_map};

/// Speed of light in mm/ps.
pub const C_MM_PER_PS: f64 = 0.299792458;
/// Temporal sampling step of the virtual instrument.
pub const DT_PS: f64 = 0.1;
/// Width of the differentiated-Gaussian reference pulse.
pub const SIGMA_T_PS: f64 = 0.3;
/// Arrival time of the reference pulse center.
pub const T0_PS: f64 = 20.0;
/// Default trace length: 102.4 ps span, frequency resolution < 0.01 THz.
pub const TRACE_LEN: usize = 1024;

// ---------------------------------------------------------------------------
// Pulse and traces
// ---------------------------------------------------------------------------

/// Reference field at time t (ps): differentiated Gaussian, unit peak.
pub fn pulse_value(t_ps: f64) -> f64 {
    let u = (t_ps - T0_PS) / SIGMA_T_PS;
    -u * (-0.5 * u * u).exp() * (0.5f64).exp()
}

#[derive(Clone, Debug)]
pub struct TimeTrace {
    pub samples: Vec<f64>,
    pub dt_ps: f64,
}

impl TimeTrace {
    pub fn new(samples: Vec<f64>, dt_ps: f64) -> Result<Self> {
        if samples.len() < 256 {
            return Err(Error::invalid(
                "TimeTrace::new",
                format!("trace must hold >= 256 samples, got {}", samples.len()),
            ));
        }
        if dt_ps <= 0.0 {
            return Err(Error::invalid("TimeTrace::new", "dt must be positive"));
        }
        Ok(TimeTrace { samples, dt_ps })
    }

    pub fn duration_ps(&self) -> f64 {
        self.samples.len() as f64 * self.dt_ps
    }
}

/// The undisturbed reference trace.
pub fn reference_trace(len: usize) -> Result<TimeTrace> {
    TimeTrace::new(
        (0..len).map(|i| pulse_value(i as f64 * DT_PS)).collect(),
        DT_PS,
    )
}

/// Transmitted trace for one pixel: the reference delayed by the optical
/// path excess and attenuated by the absorption line integral, evaluated
/// analytically (no resampling error), plus optional white noise.
///
/// `optical_delay_mm` is ∫(n−1) dl; `absorption` is ∫α dl (dimensionless).
pub fn synth_trace(
    optical_delay_mm: f64,
    absorption: f64,
    len: usize,
    snr_db: Option<f64>,
    noise_seed: u64,
) -> Result<TimeTrace> {
    if let Some(snr) = snr_db {
        if snr <= 0.0 {
            return Err(Error::invalid(
                "synth_trace",
                format!("snr_db must be positive, got {snr}"),
            ));
        }
    }
    if optical_delay_mm < 0.0 || absorption < 0.0 {
        return Err(Error::invalid(
            "synth_trace",
            "negative path integrals",
        ));
    }
    let delay_ps = optical_delay_mm / C_MM_PER_PS;
    let scale = (-absorption).exp();
    let mut samples: Vec<f64> = (0..len)
        .map(|i| scale * pulse_value(i as f64 * DT_PS - delay_ps))
        .collect();
    if let Some(snr) = snr_db {
        let rms = (samples.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
        let sigma = rms / 10f64.powf(snr / 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for s in samples.iter_mut() {
            *s += sigma * gauss(&mut rng);
        }
    }
    TimeTrace::new(samples, DT_PS)
}

/// Standard normal via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Maximum absolute field value of the trace.
pub fn time_max(trace: &TimeTrace) -> Result<f64> {
    if trace.samples.is_empty() {
        return Err(Error::invalid("time_max", "empty trace"));
    }
    Ok(trace.samples.iter().fold(0.0f64, |a, &v| a.max(v.abs())))
}

// ---------------------------------------------------------------------------
// Band extraction
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BandTable {
    frequencies: Vec<f64>,
}

impl BandTable {
    pub fn new(frequencies: Vec<f64>) -> Result<Self> {
        if frequencies.is_empty() {
            return Err(Error::invalid("BandTable::new", "empty band table"));
        }
        for w in frequencies.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(
                    "BandTable::new",
                    "frequencies must be strictly ascending",
                ));
            }
        }
        if frequencies[0] < 0.3 || *frequencies.last().unwrap() > 1.3 {
            return Err(Error::invalid(
                "BandTable::new",
                "frequencies must lie within [0.3, 1.3] THz",
            ));
        }
        Ok(BandTable { frequencies })
    }

    /// The standard 12 measurement frequencies (THz).
    pub fn standard() -> Self {
        BandTable {
            frequencies: vec![
                0.380, 0.448, 0.557, 0.621, 0.916, 0.970, 0.988, 1.097, 1.113, 1.163, 1.208,
                1.229,
            ],
        }
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

/// Complex coefficient of `trace` at `f_thz` by direct correlation:
/// c(f) = Σ E(t) e^{−i 2π f t} dt.
pub fn band_coefficient(trace: &TimeTrace, f_thz: f64) -> (f64, f64) {
    let mut re = 0.0;
    let mut im = 0.0;
    let w = std::f64::consts::TAU * f_thz;
    for (i, &e) in trace.samples.iter().enumerate() {
        let t = i as f64 * trace.dt_ps;
        re += e * (w * t).cos();
        im -= e * (w * t).sin();
    }
    (re * trace.dt_ps, im * trace.dt_ps)
}

/// Per-band relative amplitude and wrapped relative phase.
#[derive(Clone, Debug)]
pub struct BandCoeffs {
    /// |c| / |c_ref| per band.
    pub amp_rel: Vec<f64>,
    /// wrap(arg c_ref − arg c) per band, in (−π, π]; positive for a delayed
    /// pulse.
    pub phase_rel: Vec<f64>,
}

/// Wrap an angle to (−π, π].
pub fn wrap_phase(phi: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut p = phi % tau;
    if p > std::f64::consts::PI {
        p -= tau;
    } else if p <= -std::f64::consts::PI {
        p += tau;
    }
    p
}

/// Extract relative amplitude and phase at every band of the table.
pub fn extract_bands(trace: &TimeTrace, bands: &BandTable) -> Result<BandCoeffs> {
    let nyquist = 0.5 / trace.dt_ps;
    if *bands.frequencies.last().unwrap() >= nyquist {
        return Err(Error::invalid(
            "extract_bands",
            format!("band above Nyquist {nyquist} THz"),
        ));
    }
    if trace.duration_ps() < 100.0 {
        return Err(Error::invalid(
            "extract_bands",
            "trace shorter than 100 ps: frequency resolution above 0.01 THz",
        ));
    }
    let reference = reference_trace(trace.samples.len())?;
    let mut amp = Vec::with_capacity(bands.len());
    let mut phase = Vec::with_capacity(bands.len());
    for &f in bands.frequencies() {
        let (re, im) = band_coefficient(trace, f);
        let (rr, ri) = band_coefficient(&reference, f);
        let mag_ref = (rr * rr + ri * ri).sqrt();
        amp.push((re * re + im * im).sqrt() / mag_ref);
        phase.push(wrap_phase(ri.atan2(rr) - im.atan2(re)));
    }
    Ok(BandCoeffs {
        amp_rel: amp,
        phase_rel: phase,
    })
}

/// Recover the group delay (ps) that best explains a set of wrapped band
/// phases: grid search then local refinement of
/// τ* = argmax Σ_b cos(φ_b − 2π f_b τ).
pub fn fit_delay_ps(freqs_thz: &[f64], phases_wrapped: &[f64], tau_max_ps: f64) -> f64 {
    let score = |tau: f64| -> f64 {
        freqs_thz
            .iter()
            .zip(phases_wrapped)
            .map(|(&f, &p)| (p - std::f64::consts::TAU * f * tau).cos())
            .sum()
    };
    let coarse = 0.005;
    let mut best = 0.0;
    let mut best_score = score(0.0);
    let steps = (tau_max_ps / coarse).ceil() as usize;
    for i in 1..=steps {
        let tau = i as f64 * coarse;
        let s = score(tau);
        if s > best_score {
            best_score = s;
            best = tau;
        }
    }
    // refine by ternary search around the coarse peak
    let (mut lo, mut hi) = (best - coarse, best + coarse);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if score(m1) < score(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    /// Refractive index, dimensionless.
    pub n: f64,
    /// Field absorption coefficient, 1/mm.
    pub alpha: f64,
}

impl Material {
    pub fn new(n: f64, alpha: f64) -> Result<Self> {
        if !(1.0..=4.0).contains(&n) {
            return Err(Error::invalid("Material::new", format!("n={n} outside [1, 4]")));
        }
        if !(0.0..=10.0).contains(&alpha) {
            return Err(Error::invalid(
                "Material::new",
                format!("alpha={alpha} outside [0, 10]"),
            ));
        }
        Ok(Material { n, alpha })
    }

    pub const VACUUM: Material = Material { n: 1.0, alpha: 0.0 };

    /// High-impact polystyrene, the printing material of the real objects.
    pub const HIPS: Material = Material { n: 1.54, alpha: 0.25 };
}

/// Voxel grid [Z, Y, X] of refractive index and absorption.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub n: Tensor<f64>,
    pub alpha: Tensor<f64>,
    pub voxel_pitch_mm: f64,
}

impl Phantom {
    pub fn vacuum(size: usize, pitch_mm: f64) -> Result<Phantom> {
        if size == 0 {
            return Err(Error::invalid("Phantom", "degenerate size"));
        }
        Ok(Phantom {
            n: Tensor::full(&[size, size, size], 1.0),
            alpha: Tensor::zeros(&[size, size, size]),
            voxel_pitch_mm: pitch_mm,
        })
    }

    pub fn size(&self) -> usize {
        self.n.shape()[0]
    }

    fn set(&mut self, z: usize, y: usize, x: usize, m: Material) {
        self.n.set3(z, y, x, m.n);
        self.alpha.set3(z, y, x, m.alpha);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Disk,
    Bars,
    BlobComposite,
    Procedural,
}

/// Build a deterministic test object. `seed` only matters for the
/// procedural kind; the others are fixed geometry.
pub fn make_phantom(
    kind: PhantomKind,
    size: usize,
    material: Material,
    seed: u64,
) -> Result<Phantom> {
    if size < 4 {
        return Err(Error::invalid(
            "make_phantom",
            format!("size {size} too small"),
        ));
    }
    let pitch = 0.25;
    let mut ph = Phantom::vacuum(size, pitch)?;
    let c = (size as f64 - 1.0) / 2.0;
    match kind {
        PhantomKind::Disk => {
            // vertical cylinder: every axial slice is a filled circle
            let r = size as f64 / 3.0;
            for z in 0..size {
                for y in 0..size {
                    for x in 0..size {
                        let (dy, dx) = (y as f64 - c, x as f64 - c);
                        if (dy * dy + dx * dx).sqrt() <= r {
                            ph.set(z, y, x, material);
                        }
                    }
                }
            }
        }
        PhantomKind::Bars => {
            // three vertical slabs of decreasing width, resolution targets
            let w = size / 10 + 1;
            let xs = [size / 5, size / 2, (4 * size) / 5];
            for z in size / 6..(5 * size) / 6 {
                for y in size / 6..(5 * size) / 6 {
                    for (bi, &bx) in xs.iter().enumerate() {
                        let half = (w.saturating_sub(bi)).max(1);
                        for x in bx.saturating_sub(half)..(bx + half).min(size) {
                            ph.set(z, y, x, material);
                        }
                    }
                }
            }
        }
        PhantomKind::BlobComposite => {
            // fixed union of three spheres
            let blobs = [
                (0.5, 0.38, 0.42, 0.22),
                (0.45, 0.62, 0.58, 0.16),
                (0.62, 0.5, 0.5, 0.12),
            ];
            for &(bz, by, bx, br) in &blobs {
                sphere(&mut ph, bz, by, bx, br, material);
            }
        }
        PhantomKind::Procedural => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = rng.gen_range(3..=6);
            // one guaranteed central blob keeps the object connected
            sphere(&mut ph, 0.5, 0.5, 0.5, 0.18, material);
            for _ in 0..count {
                let bz = rng.gen_range(0.3..0.7);
                let by = rng.gen_range(0.3..0.7);
                let bx = rng.gen_range(0.3..0.7);
                let br = rng.gen_range(0.08..0.2);
                sphere(&mut ph, bz, by, bx, br, material);
            }
        }
    }
    Ok(ph)
}

fn sphere(ph: &mut Phantom, cz: f64, cy: f64, cx: f64, r: f64, m: Material) {
    let size = ph.size();
    let s = size as f64;
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let dz = z as f64 / s - cz;
                let dy = y as f64 / s - cy;
                let dx = x as f64 / s - cx;
                if (dz * dz + dy * dy + dx * dx).sqrt() <= r {
                    ph.set(z, y, x, m);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Path integrals
// ---------------------------------------------------------------------------

/// Per-pixel line integrals through the phantom at one view angle.
#[derive(Clone, Debug)]
pub struct PathMaps {
    /// [H, W] material path length (mm).
    pub thickness_mm: Tensor<f64>,
    /// [H, W] ∫(n−1) dl (mm): the optical path excess.
    pub optical_delay_mm: Tensor<f64>,
    /// [H, W] ∫α dl, dimensionless field attenuation exponent.
    pub absorption: Tensor<f64>,
}

/// Parallel-beam line integrals, rotation about the vertical (z) axis, using
/// the same ray model as the tomographic forward projector. H = Z slices,
/// W = detector bins.
pub fn path_integrals(phantom: &Phantom, view_angle_deg: f64) -> Result<PathMaps> {
    let size = phantom.size();
    let pitch = phantom.voxel_pitch_mm;
    let plane = size * size;
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = par_map(size, |z| {
        let slice_of = |field: &Tensor<f64>, map: &dyn Fn(f64) -> f64| -> Tensor<f64> {
            Tensor::from_fn(&[size, size], |i| map(field.data()[z * plane + i]))
        };
        let indicator = {
            let n = &phantom.n;
            let a = &phantom.alpha;
            Tensor::from_fn(&[size, size], |i| {
                if n.data()[z * plane + i] > 1.0 || a.data()[z * plane + i] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let delta_n = slice_of(&phantom.n, &|v| v - 1.0);
        let alpha = slice_of(&phantom.alpha, &|v| v);
        (
            project_slice(&indicator, view_angle_deg),
            project_slice(&delta_n, view_angle_deg),
            project_slice(&alpha, view_angle_deg),
        )
    });
    let mut thick = Vec::with_capacity(size * size);
    let mut delay = Vec::with_capacity(size * size);
    let mut absorb = Vec::with_capacity(size * size);
    for (t, d, a) in rows {
        thick.extend(t.into_iter().map(|v| v * pitch));
        delay.extend(d.into_iter().map(|v| v * pitch));
        absorb.extend(a.into_iter().map(|v| v * pitch));
    }
    Ok(PathMaps {
        thickness_mm: Tensor::new(vec![size, size], thick)?,
        optical_delay_mm: Tensor::new(vec![size, size], delay)?,
        absorption: Tensor::new(vec![size, size], absorb)?,
    })
}

// ---------------------------------------------------------------------------
// Degradation model and spectral projections
// ---------------------------------------------------------------------------

/// Min-max range stored with each normalized channel so physical values can
/// be recovered.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelNorm {
    pub min: f64,
    pub max: f64,
}

impl ChannelNorm {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormRanges {
    pub time_max: ChannelNorm,
    pub amplitude: ChannelNorm,
    pub phase: ChannelNorm,
}

impl NormRanges {
    /// Physical ranges frozen by the measurement model: unit-peak Time-max,
    /// relative amplitudes in (0, 1], wrapped phase in (−π, π].
    pub fn physical() -> Self {
        NormRanges {
            time_max: ChannelNorm { min: 0.0, max: 1.0 },
            amplitude: ChannelNorm { min: 0.0, max: 1.0 },
            phase: ChannelNorm {
                min: -std::f64::consts::PI,
                max: std::f64::consts::PI,
            },
        }
    }
}

/// One degraded multi-band measurement of a phantom view, all channels
/// normalized to [0, 1].
#[derive(Clone, Debug)]
pub struct SpectralProjection {
    /// [1, H, W]
    pub time_max: Tensor<f64>,
    /// [B, H, W]
    pub amplitude: Tensor<f64>,
    /// [B, H, W]
    pub phase: Tensor<f64>,
    pub view_angle_deg: f64,
    /// [1, H, W] binary silhouette of the material support.
    pub clean_gt: Tensor<f64>,
    pub norm: NormRanges,
    pub band_freqs_thz: Vec<f64>,
}

impl SpectralProjection {
    /// Wrapped physical phase (−π, π] at one band pixel.
    pub fn phase_raw(&self, b: usize, y: usize, x: usize) -> f64 {
        self.norm.phase.invert(self.phase.at3(b, y, x))
    }

    pub fn to_model_input(&self) -> ModelInput {
        ModelInput {
            time_max: self.time_max.clone(),
            amp: self.amplitude.clone(),
            phase: self.phase.clone(),
            band_freqs_thz: self.band_freqs_thz.clone(),
        }
    }
}

/// Diffraction-limit stand-in: per-band Gaussian blur with
/// σ(f) = k · (c/f) / pixel_pitch, plus an optional per-band extra
/// attenuation table for water absorption lines.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PsfModel {
    pub k: f64,
    /// (band frequency THz, extra field attenuation 1/mm of material path).
    pub water_lines: Vec<(f64, f64)>,
}

impl Default for PsfModel {
    fn default() -> Self {
        PsfModel {
            k: 0.5,
            water_lines: Vec::new(),
        }
    }
}

impl PsfModel {
    /// Blur width in pixels at one band.
    pub fn sigma_px(&self, f_thz: f64, pitch_mm: f64) -> f64 {
        self.k * (C_MM_PER_PS / f_thz) / pitch_mm
    }

    fn water_alpha(&self, f_thz: f64) -> f64 {
        self.water_lines
            .iter()
            .filter(|(wf, _)| (wf - f_thz).abs() < 1e-9)
            .map(|(_, a)| *a)
            .sum()
    }
}

/// Separable Gaussian blur with replicate edges; radius 3σ.
pub fn gaussian_blur2(img: &Tensor<f64>, sigma_px: f64) -> Tensor<f64> {
    if sigma_px <= 0.0 {
        return img.clone();
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let radius = (3.0 * sigma_px).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-0.5 * (i as f64 / sigma_px).powi(2)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // horizontal pass
    let hp: Vec<f64> = par_map(h * w, |i| {
        let (y, x) = (i / w, i % w);
        kernel
            .iter()
            .enumerate()
            .map(|(ki, &kv)| kv * img.at2(y, clamp(x as isize + ki as isize - radius, w)))
            .sum()
    });
    let hp = Tensor::new(vec![h, w], hp).expect("shape preserved");
    let vp: Vec<f64> = par_map(h * w, |i| {
        let (y, x) = (i / w, i % w);
        kernel
            .iter()
            .enumerate()
            .map(|(ki, &kv)| kv * hp.at2(clamp(y as isize + ki as isize - radius, h), x))
            .sum()
    });
    Tensor::new(vec![h, w], vp).expect("shape preserved")
}

#[derive(Clone, Debug)]
pub struct DegradeConfig {
    pub psf: PsfModel,
    /// None disables noise entirely.
    pub snr_db: Option<f64>,
    pub trace_len: usize,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            psf: PsfModel::default(),
            snr_db: Some(20.0),
            trace_len: TRACE_LEN,
            seed: 0,
        }
    }
}

/// Spectral peak of the reference pulse, used to blur the broadband
/// Time-max channel: f = 1/(2π σ_t).
pub fn pulse_peak_freq_thz() -> f64 {
    1.0 / (std::f64::consts::TAU * SIGMA_T_PS)
}

/// Run the full measurement model for one view: per-pixel traces, Time-max
/// and band extraction, water-line attenuation, per-band diffraction blur,
/// and normalization into a [`SpectralProjection`].
pub fn degrade(
    phantom: &Phantom,
    view_angle_deg: f64,
    bands: &BandTable,
    cfg: &DegradeConfig,
) -> Result<SpectralProjection> {
    let maps = path_integrals(phantom, view_angle_deg)?;
    let size = phantom.size();
    let b = bands.len();
    for &f in bands.frequencies() {
        let sigma = cfg.psf.sigma_px(f, phantom.voxel_pitch_mm);
        if sigma > size as f64 / 4.0 {
            return Err(Error::invalid(
                "degrade",
                format!("blur sigma {sigma:.2} px at {f} THz exceeds image size / 4"),
            ));
        }
    }
    // angle index participates in the per-pixel noise seed
    let view_key = (view_angle_deg * 1e6).round() as i64 as u64;

    // per-pixel measurement, parallel over pixels with derived RNG streams
    struct PixelOut {
        tmax: f64,
        amp: Vec<f64>,
        phase: Vec<f64>,
    }
    let noiseless_fast_path = cfg.snr_db.is_none();
    let pixels: Vec<Result<PixelOut>> = par_map(size * size, |i| {
        let delay = maps.optical_delay_mm.data()[i];
        let absorb = maps.absorption.data()[i];
        if noiseless_fast_path {
            // without noise the trace is an exactly delayed, scaled copy of
            // the reference, so every channel has a closed form (the pulse
            // decays to numerical zero well inside the window); the blur
            // stage below still applies
            let scale = (-absorb).exp();
            let amp = bands.frequencies().iter().map(|_| scale).collect();
            let phase = bands
                .frequencies()
                .iter()
                .map(|&f| {
                    wrap_phase(std::f64::consts::TAU * f * delay / C_MM_PER_PS)
                })
                .collect();
            return Ok(PixelOut {
                tmax: scale,
                amp,
                phase,
            });
        }
        let seed = derive_seed(cfg.seed, &[view_key, i as u64]);
        let trace = synth_trace(delay, absorb, cfg.trace_len, cfg.snr_db, seed)?;
        let coeffs = extract_bands(&trace, bands)?;
        Ok(PixelOut {
            tmax: time_max(&trace)?,
            amp: coeffs.amp_rel,
            phase: coeffs.phase_rel,
        })
    });
    let mut tmax = Tensor::<f64>::zeros(&[size, size]);
    let mut amp = Tensor::<f64>::zeros(&[b, size, size]);
    let mut phase = Tensor::<f64>::zeros(&[b, size, size]);
    for (i, px) in pixels.into_iter().enumerate() {
        let px = px?;
        let (y, x) = (i / size, i % size);
        tmax.set2(y, x, px.tmax);
        for bi in 0..b {
            amp.set3(bi, y, x, px.amp[bi]);
            phase.set3(bi, y, x, px.phase[bi]);
        }
    }
    // per-band water-line attenuation scales the amplitude with thickness
    for (bi, &f) in bands.frequencies().iter().enumerate() {
        let wa = cfg.psf.water_alpha(f);
        if wa > 0.0 {
            for y in 0..size {
                for x in 0..size {
                    let t = maps.thickness_mm.at2(y, x);
                    let v = amp.at3(bi, y, x) * (-wa * t).exp();
                    amp.set3(bi, y, x, v);
                }
            }
        }
    }
    // per-band diffraction blur acts on the complex field
    if cfg.psf.k > 0.0 {
        for (bi, &f) in bands.frequencies().iter().enumerate() {
            let sigma = cfg.psf.sigma_px(f, phantom.voxel_pitch_mm);
            let re = Tensor::from_fn(&[size, size], |i| {
                let (y, x) = (i / size, i % size);
                amp.at3(bi, y, x) * phase.at3(bi, y, x).cos()
            });
            let im = Tensor::from_fn(&[size, size], |i| {
                let (y, x) = (i / size, i % size);
                amp.at3(bi, y, x) * phase.at3(bi, y, x).sin()
            });
            let re = gaussian_blur2(&re, sigma);
            let im = gaussian_blur2(&im, sigma);
            for y in 0..size {
                for x in 0..size {
                    let (r, i2) = (re.at2(y, x), im.at2(y, x));
                    amp.set3(bi, y, x, (r * r + i2 * i2).sqrt());
                    phase.set3(bi, y, x, i2.atan2(r));
                }
            }
        }
        let tm_sigma = cfg.psf.sigma_px(pulse_peak_freq_thz(), phantom.voxel_pitch_mm);
        tmax = gaussian_blur2(&tmax, tm_sigma);
    }
    let norm = NormRanges::physical();
    let clean_gt = Tensor::from_fn(&[1, size, size], |i| {
        if maps.thickness_mm.data()[i] > 1e-9 {
            1.0
        } else {
            0.0
        }
    });
    // clamp keeps noise excursions inside the stored ranges
    let amp_n = amp.map(|v| norm.amplitude.apply(v).clamp(1e-12, 1.0));
    let phase_n = phase.map(|v| norm.phase.apply(v));
    let tmax_n = tmax.map(|v| norm.time_max.apply(v).clamp(0.0, 1.0));
    Ok(SpectralProjection {
        time_max: tmax_n.reshape(vec![1, size, size])?,
        amplitude: amp_n,
        phase: phase_n,
        view_angle_deg,
        clean_gt,
        norm,
        band_freqs_thz: bands.frequencies().to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Bilinear resize with the half-pixel convention.
pub fn resize_bilinear(img: &Tensor<f64>, nh: usize, nw: usize) -> Tensor<f64> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Tensor::from_fn(&[c, nh, nw], |i| {
        let ch = i / (nh * nw);
        let r = i % (nh * nw);
        let (oy, ox) = (r / nw, r % nw);
        let sy = ((oy as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let sx = ((ox as f64 + 0.5) * w as f64 / nw as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        img.at3(ch, y0, x0) * (1.0 - fy) * (1.0 - fx)
            + img.at3(ch, y0, x1) * (1.0 - fy) * fx
            + img.at3(ch, y1, x0) * fy * (1.0 - fx)
            + img.at3(ch, y1, x1) * fy * fx
    })
}

/// Mirror along the horizontal axis (x runs right to left).
pub fn flip_h(img: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let r = i % (h * w);
        let (y, x) = (r / w, r % w);
        img.at3(ch, y, w - 1 - x)
    })
}

fn crop(img: &Tensor<f64>, y0: usize, x0: usize, size: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if y0 + size > h || x0 + size > w {
        return Err(Error::invalid(
            "augment",
            format!("crop {size} at ({y0},{x0}) exceeds {h}x{w}"),
        ));
    }
    Ok(Tensor::from_fn(&[c, size, size], |i| {
        let ch = i / (size * size);
        let r = i % (size * size);
        img.at3(ch, y0 + r / size, x0 + r % size)
    }))
}

/// The concrete transform drawn for one augmentation: same geometry for all
/// channels, photometric jitter for measurement channels only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    pub crop_y: usize,
    pub crop_x: usize,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    /// No-op geometry and photometry (crop at the origin).
    pub fn neutral() -> Self {
        AugmentParams {
            scale: 1.0,
            flip: false,
            crop_y: 0,
            crop_x: 0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }
}

/// Apply a fixed transform. Output channels are `out_size` square.
pub fn augment_with(
    sample: &SpectralProjection,
    params: &AugmentParams,
    out_size: usize,
) -> Result<SpectralProjection> {
    let h = sample.time_max.shape()[1];
    let scaled = ((h as f64) * params.scale).round() as usize;
    if scaled < out_size {
        return Err(Error::invalid(
            "augment",
            format!("scaled size {scaled} below output size {out_size}"),
        ));
    }
    let geometry = |img: &Tensor<f64>| -> Result<Tensor<f64>> {
        let mut t = if params.scale == 1.0 {
            img.clone()
        } else {
            resize_bilinear(img, scaled, scaled)
        };
        if params.flip {
            t = flip_h(&t);
        }
        crop(&t, params.crop_y, params.crop_x, out_size)
    };
    let photometric = |img: &Tensor<f64>| -> Tensor<f64> {
        img.map(|v| ((v - 0.5) * params.contrast + 0.5 + params.brightness).clamp(0.0, 1.0))
    };
    Ok(SpectralProjection {
        time_max: photometric(&geometry(&sample.time_max)?),
        amplitude: photometric(&geometry(&sample.amplitude)?),
        phase: photometric(&geometry(&sample.phase)?),
        view_angle_deg: sample.view_angle_deg,
        clean_gt: geometry(&sample.clean_gt)?,
        norm: sample.norm,
        band_freqs_thz: sample.band_freqs_thz.clone(),
    })
}

/// Draw a random transform from the seed and apply it.
pub fn augment(sample: &SpectralProjection, seed: u64, out_size: usize) -> Result<SpectralProjection> {
    let h = sample.time_max.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // scale in [0.5, 1.5], floored so the crop still fits
    let min_scale = (out_size as f64 / h as f64).max(0.5);
    let scale = rng.gen_range(min_scale..=1.5);
    let scaled = ((h as f64) * scale).round() as usize;
    let max_off = scaled.saturating_sub(out_size);
    let params = AugmentParams {
        scale,
        flip: rng.gen_bool(0.5),
        crop_y: if max_off == 0 { 0 } else { rng.gen_range(0..=max_off) },
        crop_x: if max_off == 0 { 0 } else { rng.gen_range(0..=max_off) },
        brightness: rng.gen_range(-0.1..0.1),
        contrast: rng.gen_range(0.8..1.2),
    };
    augment_with(sample, &params, out_size)
}
