use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::Dataset;

/// Frozen constants of the synthetic glacier. Lengths are km, elevation m,
/// velocity m/yr and the target m/yr of surface-height change.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlacierParams {
    pub domain: f64,
    pub dome_height: f64,
    pub dome_radius: f64,
    /// Coastal thinning amplitude `a` in `−a·exp(−ocean_dist/b)`.
    pub amplitude: f64,
    /// Coastal decay length `b`.
    pub decay: f64,
    pub field_amplitude: f64,
    pub field_period_x: f64,
    pub field_period_y: f64,
    pub noise_std: f64,
    pub track_tilt: f64,
    pub track_jitter: f64,
    pub elev_noise: f64,
    pub slope_noise: f64,
    pub aspect_noise: f64,
    pub velocity_noise: f64,
}

pub const GLACIER: GlacierParams = GlacierParams {
    domain: 400.0,
    dome_height: 3000.0,
    dome_radius: 300.0,
    amplitude: 4.0,
    decay: 20.0,
    field_amplitude: 0.05,
    field_period_x: 150.0,
    field_period_y: 120.0,
    noise_std: 0.03,
    track_tilt: 0.05,
    track_jitter: 0.5,
    elev_noise: 5.0,
    slope_noise: 0.02,
    aspect_noise: 5.0,
    velocity_noise: 0.1,
};

impl GlacierParams {
    /// Coastal part of the target, without the smooth field or noise.
    pub fn coastal(&self, ocean_dist: f64) -> f64 {
        -self.amplitude * (-ocean_dist / self.decay).exp()
    }

    /// Noise-free target at a location.
    pub fn signal(&self, x: f64, y: f64) -> f64 {
        let l = self.domain;
        let od = x.min(l - x).min(y).min(l - y);
        self.coastal(od)
            + self.field_amplitude * (2.0 * PI * x / self.field_period_x).sin() * (2.0 * PI * y / self.field_period_y).cos()
    }
}

pub const GLACIER_FEATURES: [&str; 7] = ["x", "y", "elev", "ocean_dist", "slope", "aspect", "velocity"];

/// A glacier-like dataset of `n` rows sampled along satellite-style tracks.
///
/// Tracks are near-vertical lines across a square domain; points along them
/// are denser at high `y`. Elevation is a radial dome, `ocean_dist` the
/// distance to the domain edge, and the target is coastal thinning plus a
/// weak smooth field and Gaussian noise. Rows are ordered by track, then `y`.
pub fn synthesize_glacier(n: usize, seed: u64) -> Dataset {
    let g = GLACIER;
    let l = g.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tracks = (n / 200).max(10);
    let spacing = l / n_tracks as f64;
    let tracks: Vec<(f64, f64)> = (0..n_tracks)
        .map(|j| {
            let x0 = (j as f64 + 0.5) * spacing + rng.random_range(-0.25..0.25) * spacing;
            let tilt = rng.random_range(-g.track_tilt..g.track_tilt);
            (x0, tilt)
        })
        .collect();

    let mut rows: Vec<(usize, f64, f64)> = (0..n)
        .map(|_| {
            let t = rng.random_range(0..n_tracks);
            let u: f64 = rng.random();
            let y = l * ((0.25 + 2.0 * u).sqrt() - 0.5);
            let (x0, tilt) = tracks[t];
            let jitter: f64 = rng.sample(StandardNormal);
            let x = (x0 + tilt * (y - 0.5 * l) + g.track_jitter * jitter).clamp(0.0, l);
            (t, x, y.clamp(0.0, l))
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.total_cmp(&b.2)));

    let field = Normal::new(0.0, g.noise_std).unwrap();
    let mut values = Vec::with_capacity(n * 7);
    let mut target = Vec::with_capacity(n);
    for &(_, x, y) in &rows {
        let (dx, dy) = (x - 0.5 * l, y - 0.5 * l);
        let r = dx.hypot(dy);
        let elev = g.dome_height * (1.0 - (r / g.dome_radius).powi(2)) + g.elev_noise * rng.sample::<f64, _>(StandardNormal);
        // surface gradient of the dome in m per km
        let grad = 2.0 * g.dome_height * r / g.dome_radius.powi(2);
        let slope = (grad / 1000.0).atan().to_degrees() * (1.0 + g.slope_noise * rng.sample::<f64, _>(StandardNormal));
        let aspect = (dy.atan2(dx).to_degrees() + g.aspect_noise * rng.sample::<f64, _>(StandardNormal)).rem_euclid(360.0);
        let velocity = (2.0 + grad) * (g.velocity_noise * rng.sample::<f64, _>(StandardNormal)).exp();
        let od = x.min(l - x).min(y).min(l - y);
        values.extend([x, y, elev, od, slope, aspect, velocity]);
        target.push(g.signal(x, y) + field.sample(&mut rng));
    }
    Dataset {
        features: DMatrix::from_row_slice(n, 7, &values),
        feature_names: GLACIER_FEATURES.iter().map(|s| s.to_string()).collect(),
        target: DVector::from_vec(target),
        track_id: Some(rows.iter().map(|r| r.0 as i64).collect()),
        row_ids: (0..n as u64).collect(),
    }
}
