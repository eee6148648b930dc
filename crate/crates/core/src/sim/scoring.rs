//! Benchmark scoring: route completion, multiplicative infraction penalty,
//! driving score, and per-kilometer infraction rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::infractions::InfractionKind;
use super::record::EpisodeRecord;
use crate::error::{Error, Result};

/// Multiplicative penalty per infraction kind. Kinds missing from the table
/// do not reduce the penalty product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyCoefficients {
    pub collision_pedestrian: f64,
    pub collision_vehicle: f64,
    pub collision_layout: f64,
    pub red_light: f64,
    pub stop_sign: f64,
}

impl Default for PenaltyCoefficients {
    fn default() -> Self {
        PenaltyCoefficients {
            collision_pedestrian: 0.50,
            collision_vehicle: 0.60,
            collision_layout: 0.65,
            red_light: 0.70,
            stop_sign: 0.80,
        }
    }
}

impl PenaltyCoefficients {
    pub fn coefficient(&self, kind: InfractionKind) -> f64 {
        match kind {
            InfractionKind::CollisionPedestrian => self.collision_pedestrian,
            InfractionKind::CollisionVehicle => self.collision_vehicle,
            InfractionKind::CollisionLayout => self.collision_layout,
            InfractionKind::RedLight => self.red_light,
            InfractionKind::StopSign => self.stop_sign,
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("collision_pedestrian", self.collision_pedestrian),
            ("collision_vehicle", self.collision_vehicle),
            ("collision_layout", self.collision_layout),
            ("red_light", self.red_light),
            ("stop_sign", self.stop_sign),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "penalty coefficient {name} must be in (0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Scores of one episode. `ds == rc * ip` exactly by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub world_name: String,
    pub seed: u64,
    /// Route completion, percent.
    pub rc: f64,
    /// Infraction penalty, (0, 1], multiplicative from 1.0.
    pub ip: f64,
    /// Driving score, percent: rc · ip.
    pub ds: f64,
    pub distance_km: f64,
    pub infraction_counts: BTreeMap<InfractionKind, usize>,
}

pub fn episode_score(record: &EpisodeRecord, penalties: &PenaltyCoefficients) -> EpisodeScore {
    let mut counts: BTreeMap<InfractionKind, usize> = BTreeMap::new();
    let mut ip = 1.0;
    for event in &record.infractions {
        *counts.entry(event.kind).or_insert(0) += 1;
        ip *= penalties.coefficient(event.kind);
    }
    let rc = record.completion * 100.0;
    EpisodeScore {
        world_name: record.world_name.clone(),
        seed: record.seed,
        rc,
        ip,
        ds: rc * ip,
        distance_km: record.distance_km,
        infraction_counts: counts,
    }
}

/// Benchmark aggregate: arithmetic means and sample standard deviations
/// across episodes, plus per-kilometer infraction rates over the pooled
/// distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScore {
    pub episodes: Vec<EpisodeScore>,
    pub ds_mean: f64,
    pub ds_std: f64,
    pub rc_mean: f64,
    pub rc_std: f64,
    pub ip_mean: f64,
    pub ip_std: f64,
    pub total_km: f64,
    pub infraction_counts: BTreeMap<InfractionKind, usize>,
    /// Absent when no distance was driven.
    pub per_km: Option<BTreeMap<InfractionKind, f64>>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn score(records: &[EpisodeRecord], penalties: &PenaltyCoefficients) -> Result<BenchmarkScore> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("scoring needs at least one episode".into()));
    }
    penalties.validate()?;
    let episodes: Vec<EpisodeScore> =
        records.iter().map(|r| episode_score(r, penalties)).collect();
    let (ds_mean, ds_std) = mean_std(episodes.iter().map(|e| e.ds));
    let (rc_mean, rc_std) = mean_std(episodes.iter().map(|e| e.rc));
    let (ip_mean, ip_std) = mean_std(episodes.iter().map(|e| e.ip));
    let total_km: f64 = episodes.iter().map(|e| e.distance_km).sum();
    let mut counts: BTreeMap<InfractionKind, usize> = BTreeMap::new();
    for e in &episodes {
        for (&k, &c) in &e.infraction_counts {
            *counts.entry(k).or_insert(0) += c;
        }
    }
    let per_km = if total_km > 0.0 {
        Some(
            InfractionKind::ALL
                .iter()
                .map(|&k| (k, *counts.get(&k).unwrap_or(&0) as f64 / total_km))
                .collect(),
        )
    } else {
        None
    };
    Ok(BenchmarkScore {
        episodes,
        ds_mean,
        ds_std,
        rc_mean,
        rc_std,
        ip_mean,
        ip_std,
        total_km,
        infraction_counts: counts,
        per_km,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::infractions::InfractionEvent;
    use crate::sim::Termination;

    fn record(completion: f64, km: f64, infractions: Vec<InfractionKind>) -> EpisodeRecord {
        EpisodeRecord {
            world_name: "w".into(),
            seed: 0,
            dt: 0.05,
            termination: Termination::RouteComplete,
            completion,
            distance_km: km,
            duration: 10.0,
            infractions: infractions
                .into_iter()
                .map(|kind| InfractionEvent { kind, time: 1.0, position: [0.0, 0.0] })
                .collect(),
            steps: Vec::new(),
        }
    }

    #[test]
    fn ideal_episode_scores_100() {
        let s = episode_score(&record(1.0, 0.1, vec![]), &PenaltyCoefficients::default());
        assert_eq!(s.rc, 100.0);
        assert_eq!(s.ip, 1.0);
        assert_eq!(s.ds, 100.0);
    }

    #[test]
    fn penalty_product_formula() {
        // RC 90, one 0.60 collision → IP 0.60, DS 54.0
        let s = episode_score(
            &record(0.9, 0.1, vec![InfractionKind::CollisionVehicle]),
            &PenaltyCoefficients::default(),
        );
        assert!((s.ip - 0.60).abs() < 1e-12);
        assert!((s.ds - 54.0).abs() < 1e-12);
    }

    #[test]
    fn ds_identity_holds_per_episode() {
        let penalties = PenaltyCoefficients::default();
        let records = vec![
            record(0.8, 0.2, vec![InfractionKind::RedLight, InfractionKind::StopSign]),
            record(1.0, 0.3, vec![InfractionKind::CollisionPedestrian]),
            record(0.5, 0.1, vec![]),
        ];
        let bench = score(&records, &penalties).unwrap();
        for e in &bench.episodes {
            assert_eq!(e.ds.to_bits(), (e.rc * e.ip).to_bits(), "DS = RC·IP exactly");
            assert!(e.ip > 0.0 && e.ip <= 1.0);
            assert!(e.ds <= e.rc);
        }
    }

    #[test]
    fn removing_infraction_never_decreases_ds() {
        let penalties = PenaltyCoefficients::default();
        let with = episode_score(
            &record(0.9, 0.1, vec![InfractionKind::RedLight, InfractionKind::StopSign]),
            &penalties,
        );
        let without = episode_score(&record(0.9, 0.1, vec![InfractionKind::StopSign]), &penalties);
        assert!(without.ds >= with.ds);
    }

    #[test]
    fn per_km_rates_and_absence() {
        let penalties = PenaltyCoefficients::default();
        let bench = score(
            &[record(1.0, 0.25, vec![InfractionKind::RedLight, InfractionKind::RedLight])],
            &penalties,
        )
        .unwrap();
        let per_km = bench.per_km.unwrap();
        assert!((per_km[&InfractionKind::RedLight] - 8.0).abs() < 1e-12);

        let none = score(&[record(0.0, 0.0, vec![])], &penalties).unwrap();
        assert!(none.per_km.is_none(), "zero km driven → rates absent");
    }

    #[test]
    fn mean_and_std_over_episodes() {
        let penalties = PenaltyCoefficients::default();
        let bench = score(
            &[record(1.0, 0.1, vec![]), record(0.5, 0.1, vec![])],
            &penalties,
        )
        .unwrap();
        assert!((bench.ds_mean - 75.0).abs() < 1e-12);
        // sample std of {100, 50}
        assert!((bench.ds_std - (2.0f64 * 625.0).sqrt()).abs() < 1e-9);
    }
}
