//! Deterministic synthetic city: a dense downtown, a few secondary hubs and
//! a sparse background, with trips driven between them at 15 s sampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geo::{GpsPoint, Trajectory};
use crate::grid::BBox;
use crate::rng::{item_rng, DOMAIN_SYNTH};

const M_PER_DEG_LAT: f64 = 111_195.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hub {
    pub lat: f64,
    pub lon: f64,
    /// Standard deviation of trip endpoints around the hub, degrees.
    pub spread: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_trajectories: usize,
    pub seed: u64,
    pub bbox: BBox,
    pub hubs: Vec<Hub>,
    /// Probability that a trip endpoint is uniform over the bbox.
    pub background: f64,
    pub interval_s: f64,
    pub min_points: usize,
    pub max_points: usize,
    /// Cruise speed range, m/s.
    pub speed: (f64, f64),
    /// Per-sample probability of stopping for a few samples.
    pub dwell_prob: f64,
    pub start_time: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_trajectories: 2000,
            seed: 0,
            bbox: BBox::PORTO,
            hubs: vec![
                Hub { lat: 41.150, lon: -8.612, spread: 0.006, weight: 0.45 },
                Hub { lat: 41.178, lon: -8.660, spread: 0.005, weight: 0.2 },
                Hub { lat: 41.125, lon: -8.575, spread: 0.005, weight: 0.2 },
                Hub { lat: 41.200, lon: -8.560, spread: 0.004, weight: 0.15 },
            ],
            background: 0.1,
            interval_s: 15.0,
            min_points: 6,
            max_points: 40,
            speed: (5.0, 12.0),
            dwell_prob: 0.04,
            start_time: 1_372_636_800,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        let ok = !self.hubs.is_empty()
            && self.hubs.iter().all(|h| h.weight > 0.0 && h.spread > 0.0 && self.bbox.contains(h.lat, h.lon))
            && (0.0..=1.0).contains(&self.background)
            && (0.0..1.0).contains(&self.dwell_prob)
            && self.interval_s > 0.0
            && self.min_points >= 2
            && self.max_points >= self.min_points
            && self.speed.0 > 0.0
            && self.speed.1 >= self.speed.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic city settings: {self:?}")))
        }
    }
}

fn clamp_into(b: &BBox, lat: f64, lon: f64) -> (f64, f64) {
    let e = 1e-7;
    (lat.clamp(b.lat_min + e, b.lat_max - e), lon.clamp(b.lon_min + e, b.lon_max - e))
}

fn endpoint<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> (f64, f64) {
    let b = &cfg.bbox;
    if rng.random::<f64>() < cfg.background {
        return (rng.random_range(b.lat_min..b.lat_max), rng.random_range(b.lon_min..b.lon_max));
    }
    let total: f64 = cfg.hubs.iter().map(|h| h.weight).sum();
    let mut u = rng.random::<f64>() * total;
    let hub = cfg
        .hubs
        .iter()
        .find(|h| {
            u -= h.weight;
            u < 0.0
        })
        .unwrap_or(&cfg.hubs[cfg.hubs.len() - 1]);
    let n = Normal::new(0.0, hub.spread).expect("positive spread");
    clamp_into(b, hub.lat + n.sample(rng), hub.lon + n.sample(rng))
}

/// Trip `index` of the city; independent of every other trip.
pub fn synth_trip(cfg: &SynthConfig, index: usize) -> Trajectory {
    let mut rng = item_rng(cfg.seed, DOMAIN_SYNTH, index as u64);
    let (lat0, lon0) = endpoint(cfg, &mut rng);
    let (lat1, lon1) = endpoint(cfg, &mut rng);
    let cos_lat = lat0.to_radians().cos();
    let speed = rng.random_range(cfg.speed.0..=cfg.speed.1);
    let step_m = speed * cfg.interval_s;
    let dist_m = ((lat1 - lat0) * M_PER_DEG_LAT).hypot((lon1 - lon0) * M_PER_DEG_LAT * cos_lat);
    let n_target = ((dist_m / step_m).ceil() as usize + 1).clamp(cfg.min_points, cfg.max_points);
    let jitter = Normal::new(0.0, 8.0 / M_PER_DEG_LAT).expect("positive");
    let t0 = cfg.start_time as f64 + rng.random_range(0.0f64..86_400.0 * 30.0).floor();

    let mut points = Vec::with_capacity(n_target);
    let mut k = 0usize;
    let moves = (n_target - 1).max(1) as f64;
    while points.len() < n_target {
        let f = (k as f64 / moves).min(1.0);
        // gentle bend so trips are not straight chords
        let bend = 0.15 * (std::f64::consts::PI * f).sin();
        let lat = lat0 + f * (lat1 - lat0) - bend * (lon1 - lon0) * cos_lat + jitter.sample(&mut rng);
        let lon = lon0 + f * (lon1 - lon0) + bend * (lat1 - lat0) / cos_lat + jitter.sample(&mut rng);
        let (lat, lon) = clamp_into(&cfg.bbox, lat, lon);
        let t = t0 + cfg.interval_s * points.len() as f64;
        points.push(GpsPoint { lat, lon, t });
        if rng.random::<f64>() < cfg.dwell_prob {
            let stay = rng.random_range(1..=4usize);
            for _ in 0..stay {
                if points.len() >= n_target {
                    break;
                }
                let t = t0 + cfg.interval_s * points.len() as f64;
                points.push(GpsPoint { lat, lon, t });
            }
        }
        k += 1;
    }
    Trajectory {
        id: format!("S{:08}", index),
        points,
    }
}

pub fn synth_city(cfg: &SynthConfig, exec: Execution) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    Ok(exec.map_range(cfg.n_trajectories, |i| synth_trip(cfg, i)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_bounds() {
        let cfg = SynthConfig {
            n_trajectories: 200,
            ..Default::default()
        };
        let a = synth_city(&cfg, Execution::Parallel).unwrap();
        let b = synth_city(&cfg, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert!(t.points.len() >= cfg.min_points && t.points.len() <= cfg.max_points);
            assert!(t.points.iter().all(|p| cfg.bbox.contains(p.lat, p.lon)));
            assert!(t.points.windows(2).all(|w| w[1].t - w[0].t == 15.0));
            Trajectory::new(t.id.clone(), t.points.clone()).unwrap();
        }
    }

    #[test]
    fn downtown_is_denser_than_background() {
        let cfg = SynthConfig {
            n_trajectories: 300,
            ..Default::default()
        };
        let trips = synth_city(&cfg, Execution::Parallel).unwrap();
        let near = |lat: f64, lon: f64| trips.iter().flat_map(|t| &t.points).filter(|p| (p.lat - lat).abs() < 0.005 && (p.lon - lon).abs() < 0.005).count();
        assert!(near(41.150, -8.612) > 5 * near(41.110, -8.690).max(1));
    }
}
