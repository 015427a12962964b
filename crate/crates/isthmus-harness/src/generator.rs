//! Synthetic clinical and sensor document generation.
//!
//! Everything derives from the scenario seed through one ChaCha stream in
//! a fixed visit order (cycle-major, patient-minor, vitals before labs),
//! so the full schedule is reproducible byte for byte. Value ranges are
//! plausible clinical ranges (HR 40-180, SBP 70-220, WBC 2-25) purely so
//! range-filter tests have something realistic to chew on.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::scenario::ScenarioScript;

/// Simulated timeline start; cycles advance one hour each.
const EPOCH: &str = "2026-01-15T00:00:00.000Z";

fn cycle_ts(cycle: usize, minute: usize) -> String {
    // EPOCH + cycle hours + `minute` minutes, rendered without date math
    // corner cases (the simulated window stays inside one month).
    let base_hour = cycle % 24;
    let day = 15 + cycle / 24;
    format!("2026-01-{day:02}T{base_hour:02}:{:02}:00.000Z", minute % 60)
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Per-patient stable attributes drawn once from the seed.
#[derive(Debug, Clone)]
pub struct PatientProfile {
    pub patient_id: String,
    pub age: u32,
    pub sex: &'static str,
    pub unit: &'static str,
    pub base_hr: f64,
    pub base_sbp: f64,
    pub base_wbc: f64,
}

/// The full deterministic schedule: `docs[cycle]` holds that cycle's
/// documents in emission order.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub patients: Vec<PatientProfile>,
    pub docs: Vec<Vec<Value>>,
}

/// Generate the clinical (EHR) schedule for a script.
pub fn ehr_schedule(script: &ScenarioScript) -> Schedule {
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let mut patients = Vec::with_capacity(script.patient_count);
    for i in 0..script.patient_count {
        let sex = if rng.random_bool(0.5) { "F" } else { "M" };
        let unit = *["icu", "ward", "er"]
            .get(rng.random_range(0..3usize))
            .unwrap();
        patients.push(PatientProfile {
            patient_id: format!("P{:03}", i + 1),
            age: rng.random_range(18..95),
            sex,
            unit,
            base_hr: rng.random_range(55.0..110.0),
            base_sbp: rng.random_range(95.0..150.0),
            base_wbc: rng.random_range(4.0..14.0),
        });
    }

    let mut docs = Vec::with_capacity(script.cycle_count);
    for cycle in 0..script.cycle_count {
        let hr_shift = match script.hr_shift {
            Some(s) if cycle > s.after_cycle => s.delta,
            _ => 0.0,
        };
        let mut cycle_docs = Vec::new();
        for patient in &patients {
            for v in 0..script.vitals_per_patient {
                let hr = round1(patient.base_hr + hr_shift + rng.random_range(-8.0..8.0));
                let sbp = round1(patient.base_sbp + rng.random_range(-10.0..10.0));
                let temp = round1(rng.random_range(97.0..100.5));
                let spo2 = round1(rng.random_range(92.0..100.0));
                cycle_docs.push(json!({
                    "pat": {"id": patient.patient_id, "age": patient.age, "sex": patient.sex},
                    "enc": {"id": format!("E{}", &patient.patient_id[1..]), "unit": patient.unit},
                    "vitals": [{
                        "hr": hr.clamp(40.0, 180.0),
                        "sbp": sbp.clamp(70.0, 220.0),
                        "temp": temp,
                        "spo2": spo2,
                        "ts": cycle_ts(cycle, v)
                    }],
                    "cycle": cycle
                }));
            }
            for l in 0..script.labs_per_patient {
                let wbc = round1(patient.base_wbc + rng.random_range(-2.0..2.0));
                let lactate = round1(rng.random_range(0.5..4.5));
                cycle_docs.push(json!({
                    "pat": {"id": patient.patient_id},
                    "labs": [{
                        "wbc": wbc.clamp(2.0, 25.0),
                        "lactate": lactate,
                        "ts": cycle_ts(cycle, 30 + l)
                    }],
                    "cycle": cycle
                }));
            }
        }
        docs.push(cycle_docs);
    }
    Schedule { patients, docs }
}

/// Generate the sensor (IoT) schedule for a script.
pub fn sensor_schedule(script: &ScenarioScript) -> Schedule {
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let mut docs = Vec::with_capacity(script.cycle_count);
    for cycle in 0..script.cycle_count {
        let mut cycle_docs = Vec::new();
        for r in 0..script.readings_per_cycle {
            let mut pm25 = round1(rng.random_range(2.0..60.0));
            if script.bad_pm25_at_cycle == Some(cycle) && r == 0 {
                pm25 = -5.0;
            }
            cycle_docs.push(json!({
                "sensor": {"id": format!("aq-{:02}", r % 4 + 1)},
                "pm25": pm25,
                "co2": round1(rng.random_range(380.0..1600.0)),
                "temperature": round1(rng.random_range(17.0..29.0)),
                "humidity": round1(rng.random_range(25.0..65.0)),
                "ts": cycle_ts(cycle, r),
                "cycle": cycle,
                "n": r
            }));
        }
        docs.push(cycle_docs);
    }
    Schedule {
        patients: Vec::new(),
        docs,
    }
}

/// Binary outcome labels per patient: scripted when present, otherwise
/// derived deterministically from the patient's generated physiology.
pub fn outcomes(script: &ScenarioScript, schedule: &Schedule) -> BTreeMap<String, bool> {
    if !script.outcomes.is_empty() {
        return script
            .outcomes
            .iter()
            .map(|(k, v)| (k.clone(), *v != 0))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed.wrapping_add(0x07c0));
    let mut out = BTreeMap::new();
    for patient in &schedule.patients {
        // Higher heart rate and lower blood pressure trend positive.
        let z = 0.04 * (patient.base_hr - 80.0) - 0.02 * (patient.base_sbp - 120.0) - 0.8;
        let p = 1.0 / (1.0 + (-z).exp());
        out.insert(patient.patient_id.clone(), rng.random_bool(p.clamp(0.02, 0.98)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_are_seed_deterministic() {
        let script = ScenarioScript::new(42);
        let a = ehr_schedule(&script);
        let b = ehr_schedule(&script);
        assert_eq!(a.docs, b.docs);
        let other = ehr_schedule(&ScenarioScript::new(43));
        assert_ne!(a.docs, other.docs);
    }

    #[test]
    fn cycle_doc_counts_follow_script() {
        let mut script = ScenarioScript::new(1);
        script.patient_count = 4;
        script.cycle_count = 3;
        script.vitals_per_patient = 2;
        script.labs_per_patient = 1;
        let schedule = ehr_schedule(&script);
        assert_eq!(schedule.docs.len(), 3);
        for cycle in &schedule.docs {
            assert_eq!(cycle.len(), 4 * 3);
        }
    }

    #[test]
    fn hr_shift_moves_the_mean() {
        let mut script = ScenarioScript::new(7);
        script.patient_count = 30;
        script.cycle_count = 4;
        script.hr_shift = Some(crate::scenario::HrShift {
            after_cycle: 1,
            delta: 40.0,
        });
        let schedule = ehr_schedule(&script);
        let mean_hr = |cycle: &Vec<Value>| {
            let hrs: Vec<f64> = cycle
                .iter()
                .filter_map(|d| d["vitals"][0]["hr"].as_f64())
                .collect();
            hrs.iter().sum::<f64>() / hrs.len() as f64
        };
        let early = mean_hr(&schedule.docs[0]);
        let late = mean_hr(&schedule.docs[3]);
        assert!(late - early > 25.0, "early {early}, late {late}");
    }

    #[test]
    fn sensor_schedule_counts_and_fault_value() {
        let mut script = ScenarioScript::new(5);
        script.cycle_count = 3;
        script.readings_per_cycle = 10;
        script.bad_pm25_at_cycle = Some(1);
        let schedule = sensor_schedule(&script);
        let total: usize = schedule.docs.iter().map(Vec::len).sum();
        assert_eq!(total, 30);
        assert_eq!(schedule.docs[1][0]["pm25"].as_f64(), Some(-5.0));
    }

    #[test]
    fn outcomes_include_every_patient_and_are_stable() {
        let mut script = ScenarioScript::new(11);
        script.patient_count = 25;
        let schedule = ehr_schedule(&script);
        let a = outcomes(&script, &schedule);
        let b = outcomes(&script, &schedule);
        assert_eq!(a, b);
        assert_eq!(a.len(), 25);
    }
}
