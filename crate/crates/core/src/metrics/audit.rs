use std::collections::BTreeMap;

use serde::Serialize;

use crate::adapters::RoutingKey;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Outputs of one route on its fixed probe inputs, recorded when the route's
/// adaptation finished.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSnapshot {
    pub key: RoutingKey,
    pub step: usize,
    pub outputs: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeDeviation {
    pub route: String,
    pub recorded_step: usize,
    pub probes: usize,
    pub max_abs_deviation: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub after_step: usize,
    pub routes: Vec<ProbeDeviation>,
    pub pass: bool,
}

/// Replays every route in `expected` and compares against its snapshot.
/// A route passes only at deviation exactly zero.
pub fn forgetting_audit(
    after_step: usize,
    expected: &[RoutingKey],
    snapshots: &BTreeMap<RoutingKey, ProbeSnapshot>,
    mut replay: impl FnMut(&RoutingKey) -> Result<Vec<Tensor>>,
) -> Result<AuditReport> {
    let mut routes = Vec::with_capacity(expected.len());
    for key in expected {
        let snap = snapshots
            .get(key)
            .ok_or_else(|| Error::AuditConfig(format!("no probe snapshot recorded for {key}")))?;
        let now = replay(key)?;
        let dev = if now.len() != snap.outputs.len() {
            f64::INFINITY
        } else {
            now.iter()
                .zip(&snap.outputs)
                .map(|(a, b)| match a.max_abs_diff(b) {
                    Ok(d) if !d.is_nan() => d,
                    _ => f64::INFINITY,
                })
                .fold(0.0, f64::max)
        };
        routes.push(ProbeDeviation {
            route: key.to_string(),
            recorded_step: snap.step,
            probes: snap.outputs.len(),
            max_abs_deviation: dev,
            pass: dev == 0.0,
        });
    }
    let pass = routes.iter().all(|r| r.pass);
    Ok(AuditReport {
        after_step,
        routes,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_passes_and_drift_fails() {
        let key = RoutingKey::classification();
        let outputs = vec![Tensor::from_fn(&[3], |i| i as f64)];
        let mut snaps = BTreeMap::new();
        snaps.insert(
            key,
            ProbeSnapshot {
                key,
                step: 0,
                outputs: outputs.clone(),
            },
        );
        let ok = forgetting_audit(1, &[key], &snaps, |_| Ok(outputs.clone())).unwrap();
        assert!(ok.pass);
        assert_eq!(ok.routes[0].max_abs_deviation, 0.0);

        let drift = vec![outputs[0].map(|v| v + 1e-15)];
        let bad = forgetting_audit(1, &[key], &snaps, |_| Ok(drift.clone())).unwrap();
        assert!(!bad.pass && bad.routes[0].max_abs_deviation > 0.0);
    }

    #[test]
    fn missing_snapshot_is_configuration_error() {
        let snaps = BTreeMap::new();
        let r = forgetting_audit(1, &[RoutingKey::prognosis()], &snaps, |_| Ok(vec![]));
        assert!(matches!(r, Err(Error::AuditConfig(_))));
    }
}
