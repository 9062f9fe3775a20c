//! Deterministic synthetic datasets for tests, benchmarks, and demos.
//!
//! `jet_surrogate` mimics the statistics of a turbulent-jet pressure record:
//! a plume-shaped spatial envelope, a few dozen convecting wave packets with
//! slowly wandering phases, a broadband colored-noise floor, and a nonzero
//! mean profile. Amplitude constants are calibrated so that a 10-mode POD
//! of an 800-snapshot train split leaves a residual in the same range as
//! the reference jet dataset this layout imitates (pressure fluctuations
//! of order 1e-2, slowly decaying mode spectrum).
//!
//! `latlon_surrogate` produces a global-grid record dominated by a handful
//! of low-frequency oscillations (30..90 day periods at dt = 0.5 day), for
//! exercising spherical weighting and long-block segmentations.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LatLonGrid, SnapshotMatrix};

#[derive(Debug, Clone, Copy)]
pub struct JetSurrogateSpec {
    pub n_radial: usize,
    pub n_axial: usize,
    pub nt: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for JetSurrogateSpec {
    fn default() -> Self {
        JetSurrogateSpec {
            n_radial: 22,
            n_axial: 88,
            nt: 1000,
            dt: 0.2,
            seed: 7,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Plume envelope: a shear-layer band in the radial direction that widens
/// and decays downstream.
fn jet_envelope(n_radial: usize, n_axial: usize) -> Vec<f64> {
    let mut env = vec![0.0; n_radial * n_axial];
    for ir in 0..n_radial {
        let r = ir as f64 / (n_radial - 1) as f64; // 0 = axis, 1 = far field
        for ix in 0..n_axial {
            let x = ix as f64 / (n_axial - 1) as f64;
            let r_core = 0.25 + 0.45 * x; // shear layer radius grows downstream
            let width = 0.12 + 0.25 * x;
            let radial = (-((r - r_core) / width).powi(2)).exp();
            let axial = (0.15 + x).powf(0.5) * (-1.6 * x).exp() + 0.05;
            env[ir * n_axial + ix] = radial * axial;
        }
    }
    env
}

/// Jet-like pressure record, uncentered (a mean profile is included).
pub fn jet_surrogate(spec: &JetSurrogateSpec) -> SnapshotMatrix {
    let m = spec.n_radial * spec.n_axial;
    let nt = spec.nt;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let env = jet_envelope(spec.n_radial, spec.n_axial);

    // Convecting wave packets: amplitude decays as a power law so the POD
    // spectrum falls off slowly, like measured turbulence.
    let n_waves = 60;
    let amp0 = 7.53e-2;
    let decay = -0.65;
    let noise_level = 7.53e-3;
    let phase_jitter = 0.10;

    struct Wave {
        freq: f64,      // cycles per snapshot
        k_axial: f64,   // spatial wavenumber
        k_radial: f64,
        amp: f64,
        phase0: f64,
        mod_freq: f64,
        mod_depth: f64,
    }
    let mut waves = Vec::with_capacity(n_waves);
    for w in 0..n_waves {
        // frequencies sweep the lower two thirds of the band, off-bin
        let f = 0.02 + 0.28 * (w as f64 + 0.7 * rng.random::<f64>()) / n_waves as f64;
        waves.push(Wave {
            freq: f,
            k_axial: 2.0 * std::f64::consts::PI * (1.5 + 11.0 * f + rng.random::<f64>()),
            k_radial: 2.0 * std::f64::consts::PI * (0.4 + 1.2 * rng.random::<f64>()),
            amp: amp0 * (w as f64 + 1.0).powf(decay),
            phase0: 2.0 * std::f64::consts::PI * rng.random::<f64>(),
            mod_freq: 0.002 + 0.01 * rng.random::<f64>(),
            mod_depth: 0.25 + 0.3 * rng.random::<f64>(),
        });
    }

    // Per-wave phase random walks give the record a finite coherence time.
    let mut phase_walks = vec![vec![0.0f64; nt]; n_waves];
    for (w, walk) in phase_walks.iter_mut().enumerate() {
        let scale = phase_jitter * (0.5 + waves[w].freq / 0.3);
        let mut acc = 0.0;
        for t in 0..nt {
            acc += scale * normal(&mut rng) * 0.08;
            walk[t] = acc;
        }
    }

    // AR(1) colored noise sharing the spatial envelope.
    let alpha = 0.55;
    let mut noise_state: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();

    // Mean profile: a steady plume.
    let mean_scale = 0.67;

    let mut values = Array2::zeros((m, nt));
    let two_pi = 2.0 * std::f64::consts::PI;
    for t in 0..nt {
        // advance noise
        for s in noise_state.iter_mut() {
            *s = alpha * *s + (1.0 - alpha * alpha).sqrt() * normal(&mut rng);
        }
        for ir in 0..spec.n_radial {
            for ix in 0..spec.n_axial {
                let i = ir * spec.n_axial + ix;
                let x = ix as f64 / (spec.n_axial - 1) as f64;
                let r = ir as f64 / (spec.n_radial - 1) as f64;
                let mut v = mean_scale * env[i];
                for (w, wave) in waves.iter().enumerate() {
                    let th = two_pi * wave.freq * t as f64
                        + wave.phase0
                        + phase_walks[w][t]
                        - wave.k_axial * x
                        + wave.k_radial * r;
                    let slow =
                        1.0 + wave.mod_depth * (two_pi * wave.mod_freq * t as f64).sin();
                    v += wave.amp * slow * env[i] * th.cos();
                }
                v += noise_level * env[i] * noise_state[i];
                values[[i, t]] = v;
            }
        }
    }

    SnapshotMatrix {
        values,
        n_space: m,
        n_vars: 1,
        dt: spec.dt,
        grid: None,
        mean: None,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LatLonSurrogateSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    pub nt: usize,
    /// Sampling interval in days.
    pub dt: f64,
    pub seed: u64,
}

impl Default for LatLonSurrogateSpec {
    fn default() -> Self {
        LatLonSurrogateSpec {
            n_lat: 25,
            n_lon: 48,
            nt: 5000,
            dt: 0.5,
            seed: 11,
        }
    }
}

/// Global-grid record: eastward-propagating equatorial oscillations in the
/// 30..90-day band plus faster planetary waves and broadband noise.
pub fn latlon_surrogate(spec: &LatLonSurrogateSpec) -> (SnapshotMatrix, LatLonGrid) {
    let (n_lat, n_lon, nt) = (spec.n_lat, spec.n_lon, spec.nt);
    let m = n_lat * n_lon;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let lats: Vec<f64> = (0..n_lat)
        .map(|i| -90.0 + 180.0 * i as f64 / (n_lat - 1) as f64)
        .collect();
    let lons: Vec<f64> = (0..n_lon)
        .map(|j| 360.0 * j as f64 / n_lon as f64)
        .collect();

    struct Osc {
        period_days: f64,
        zonal_wavenumber: f64,
        lat_width: f64,
        amp: f64,
        phase0: f64,
        eastward: f64,
    }
    let mut oscs = Vec::new();
    // intraseasonal band
    for (w, period) in [60.0, 45.0, 36.0, 80.0, 30.0].iter().enumerate() {
        oscs.push(Osc {
            period_days: *period,
            zonal_wavenumber: 1.0 + w as f64 % 3.0,
            lat_width: 18.0 + 6.0 * rng.random::<f64>(),
            amp: 1.0e-3 * (1.0 / (w as f64 + 1.0)).powf(0.5),
            phase0: 2.0 * std::f64::consts::PI * rng.random::<f64>(),
            eastward: 1.0,
        });
    }
    // faster planetary waves
    for w in 0..8 {
        oscs.push(Osc {
            period_days: 4.0 + 18.0 * rng.random::<f64>(),
            zonal_wavenumber: 2.0 + (w % 5) as f64,
            lat_width: 25.0 + 20.0 * rng.random::<f64>(),
            amp: 2.5e-4 * (1.0 / (w as f64 + 1.0)).powf(0.4),
            phase0: 2.0 * std::f64::consts::PI * rng.random::<f64>(),
            eastward: if w % 3 == 0 { -1.0 } else { 1.0 },
        });
    }

    let noise_level = 6.0e-5;
    let alpha = 0.7;
    let mut noise_state: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
    // modest phase jitter so oscillations stay predictable but not exact
    let mut walks = vec![0.0f64; oscs.len()];

    let two_pi = 2.0 * std::f64::consts::PI;
    let mut values = Array2::zeros((m, nt));
    for t in 0..nt {
        let day = t as f64 * spec.dt;
        for s in noise_state.iter_mut() {
            *s = alpha * *s + (1.0 - alpha * alpha).sqrt() * normal(&mut rng);
        }
        for (w, walk) in walks.iter_mut().enumerate() {
            let _ = w;
            *walk += 0.01 * normal(&mut rng);
        }
        for (il, &lat) in lats.iter().enumerate() {
            for (jl, &lon) in lons.iter().enumerate() {
                let i = il * n_lon + jl;
                let mut v = 2.0e-4 * (lat.to_radians().cos()); // mean state
                for (w, osc) in oscs.iter().enumerate() {
                    let tropical = (-(lat / osc.lat_width).powi(2)).exp();
                    let th = two_pi * (day / osc.period_days) * osc.eastward
                        - osc.zonal_wavenumber * lon.to_radians()
                        + osc.phase0
                        + walks[w];
                    v += osc.amp * tropical * th.cos();
                }
                v += noise_level * (lat.to_radians().cos()) * noise_state[i];
                values[[i, t]] = v;
            }
        }
    }

    let grid = LatLonGrid { lats, lons };
    (
        SnapshotMatrix {
            values,
            n_space: m,
            n_vars: 1,
            dt: spec.dt,
            grid: Some(grid.clone()),
            mean: None,
        },
        grid,
    )
}
