//! Browser demo. Each operation takes plain numbers and returns a JSON string
//! so the page needs no bindings beyond `wasm-bindgen`'s string passing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::Serialize;

use nudge_core::analysis::report::accumulated_difference_svg;
use nudge_core::analysis::{analyze, power_two_sided, sample_size_per_group, AnalysisOptions};
use nudge_core::bandit::{Arm, BanditState, Prior};
use nudge_core::orchestrator::{run_experiment, ExperimentConfig, World};
use nudge_core::simulator::SimConfig;

#[derive(Debug, Serialize)]
pub struct PowerPoint {
    pub n: usize,
    pub power: f64,
}

#[derive(Debug, Serialize)]
pub struct PowerPlan {
    pub sample_size: Option<usize>,
    pub curve: Vec<PowerPoint>,
}

/// Power of the two-sided Welch test for `n` per group, plus the smallest
/// `n` reaching `target`.
pub fn power_plan(effect_size: f64, alpha: f64, target: f64, n_max: usize) -> Result<PowerPlan, String> {
    if !(effect_size > 0.0) || !(alpha > 0.0 && alpha < 1.0) || !(target > 0.0 && target < 1.0) {
        return Err("need effect size > 0 and alpha, target in (0, 1)".into());
    }
    let n_max = n_max.clamp(4, 100_000);
    let step = (n_max / 100).max(1);
    let curve = (2..=n_max)
        .step_by(step)
        .map(|n| PowerPoint { n, power: power_two_sided(effect_size, n, n, alpha) })
        .collect();
    Ok(PowerPlan { sample_size: sample_size_per_group(effect_size, alpha, target), curve })
}

#[derive(Debug, Serialize)]
pub struct AllocationWeek {
    pub week: u32,
    /// Share of responders (`f = 1`) sent the nudge.
    pub responders_treated: f64,
    /// Share of non-responders (`f = 0`) sent the nudge.
    pub others_treated: f64,
}

/// Thompson sampling on context `[1, f]` where only responders gain `effect`
/// from the nudge. Rewards are `1 + effect·f·treat + N(0, 1)`.
pub fn bandit_allocation(effect: f64, users: usize, weeks: u32, seed: u64) -> Result<Vec<AllocationWeek>, String> {
    if !effect.is_finite() || users == 0 || users > 20_000 || weeks == 0 || weeks > 52 {
        return Err("need finite effect, 1..=20000 users and 1..=52 weeks".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let responder = Bernoulli::new(0.5).map_err(|e| e.to_string())?;
    let noise = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let flags: Vec<bool> = (0..users).map(|_| responder.sample(&mut rng)).collect();
    let mut state = BanditState::new(2, Prior::default(), seed);
    let mut out = Vec::new();
    for week in 1..=weeks {
        let snapshot = state.snapshot().map_err(|e| e.to_string())?;
        let mut batches: [(Vec<Vec<f64>>, Vec<f64>); 2] = Default::default();
        let mut treated = [[0usize; 2]; 2];
        for &f in &flags {
            let x = vec![1.0, if f { 1.0 } else { 0.0 }];
            let arm = snapshot.assign(&x, &mut rng).map_err(|e| e.to_string())?.arm;
            let treat = arm == Arm::Treat;
            treated[f as usize][0] += treat as usize;
            treated[f as usize][1] += 1;
            let reward = 1.0 + if treat { effect * x[1] } else { 0.0 } + noise.sample(&mut rng);
            let batch = &mut batches[treat as usize];
            batch.0.push(x);
            batch.1.push(reward);
        }
        for (arm, (x, y)) in [Arm::Control, Arm::Treat].into_iter().zip(&batches) {
            let post = state.arm(arm).update(x, y).map_err(|e| e.to_string())?;
            *state.arm_mut(arm) = post;
        }
        let share = |[hit, total]: [usize; 2]| if total == 0 { 0.0 } else { hit as f64 / total as f64 };
        out.push(AllocationWeek { week, responders_treated: share(treated[1]), others_treated: share(treated[0]) });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct DayDifference {
    pub day: usize,
    pub mean_difference: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub significant: bool,
}

#[derive(Debug, Serialize)]
pub struct ClosedLoop {
    pub adaptive_users: usize,
    pub pure_control_users: usize,
    pub significant_fraction: f64,
    pub longest_significant_run_days: usize,
    pub days: Vec<DayDifference>,
    pub svg: String,
}

/// Simulated experiment with no context features, analysed on the
/// accumulated expenditure of adaptive versus pure-control users.
pub fn closed_loop(pharmacies: usize, weeks: u32, uplift: f64, seed: u64) -> Result<ClosedLoop, String> {
    if !(10..=2_000).contains(&pharmacies) || !(1..=12).contains(&weeks) || !(uplift > 0.0) {
        return Err("need 10..=2000 pharmacies, 1..=12 weeks and uplift > 0".into());
    }
    let config: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "name": "demo",
        "start_date": "2024-02-05",
        "duration_weeks": weeks,
        "pure_control_fraction": 0.4,
        "context": { "features": [] },
        "seed": seed,
    }))
    .map_err(|e| e.to_string())?;
    let sim = SimConfig { n_pharmacies: pharmacies, weeks, uplift_effect: uplift, seed, ..SimConfig::default() };
    let (world, history) = World::simulated(sim, &config).map_err(|e| e.to_string())?;
    let run = run_experiment(&config, &world, history).map_err(|e| e.to_string())?;
    let options = AnalysisOptions { tsne: None, ..AnalysisOptions::default() };
    let report = analyze(&run.decisions, &run.events, None, None, &options).map_err(|e| e.to_string())?;
    let days = report
        .accumulated
        .tests
        .iter()
        .map(|t| DayDifference {
            day: t.day,
            mean_difference: t.mean_difference,
            ci_low: t.ci_low,
            ci_high: t.ci_high,
            significant: t.significant,
        })
        .collect();
    Ok(ClosedLoop {
        adaptive_users: report.adaptive_users,
        pure_control_users: report.pure_control_users,
        significant_fraction: report.accumulated_significant_fraction,
        longest_significant_run_days: report.longest_significant_run_days,
        days,
        svg: accumulated_difference_svg(&report),
    })
}

fn to_json<T: Serialize>(result: Result<T, String>) -> Result<String, String> {
    result.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
}

pub fn power_plan_json(effect_size: f64, alpha: f64, target: f64, n_max: usize) -> Result<String, String> {
    to_json(power_plan(effect_size, alpha, target, n_max))
}

pub fn bandit_allocation_json(effect: f64, users: usize, weeks: u32, seed: u64) -> Result<String, String> {
    to_json(bandit_allocation(effect, users, weeks, seed))
}

pub fn closed_loop_json(pharmacies: usize, weeks: u32, uplift: f64, seed: u64) -> Result<String, String> {
    to_json(closed_loop(pharmacies, weeks, uplift, seed))
}

#[cfg(target_arch = "wasm32")]
mod web {
    use wasm_bindgen::prelude::*;

    fn js(result: Result<String, String>) -> Result<String, JsError> {
        result.map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = powerPlan)]
    pub fn power_plan(effect_size: f64, alpha: f64, target: f64, n_max: u32) -> Result<String, JsError> {
        js(super::power_plan_json(effect_size, alpha, target, n_max as usize))
    }

    #[wasm_bindgen(js_name = banditAllocation)]
    pub fn bandit_allocation(effect: f64, users: u32, weeks: u32, seed: u32) -> Result<String, JsError> {
        js(super::bandit_allocation_json(effect, users as usize, weeks, seed as u64))
    }

    #[wasm_bindgen(js_name = closedLoop)]
    pub fn closed_loop(pharmacies: u32, weeks: u32, uplift: f64, seed: u32) -> Result<String, JsError> {
        js(super::closed_loop_json(pharmacies as usize, weeks, uplift, seed as u64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_plan_matches_the_core_sample_size() {
        let plan = power_plan(0.12, 0.10, 0.65, 1_000).unwrap();
        assert_eq!(plan.sample_size, Some(573));
        assert!(plan.curve.windows(2).all(|w| w[1].power >= w[0].power));
        assert!(power_plan(0.0, 0.1, 0.8, 100).is_err());
    }

    #[test]
    fn bandit_learns_to_nudge_responders() {
        let weeks = bandit_allocation(3.0, 400, 8, 11).unwrap();
        let last = weeks.last().unwrap();
        assert!(last.responders_treated > 0.9, "{last:?}");
        assert_eq!(bandit_allocation(1.0, 400, 8, 11).unwrap().len(), 8);
        assert!(bandit_allocation(1.0, 0, 8, 11).is_err());
    }

    #[test]
    fn allocation_is_seeded() {
        let a = bandit_allocation_json(1.0, 200, 4, 3).unwrap();
        assert_eq!(a, bandit_allocation_json(1.0, 200, 4, 3).unwrap());
    }

    #[test]
    fn closed_loop_reports_a_daily_series() {
        let out = closed_loop(40, 2, 1.15, 5).unwrap();
        assert_eq!(out.days.len(), 14);
        assert!(out.adaptive_users > 0 && out.pure_control_users > 0);
        assert!(out.svg.starts_with("<svg"));
        assert!(closed_loop_json(5, 2, 1.15, 5).is_err());
    }
}
