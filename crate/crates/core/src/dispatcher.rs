//! Rule-based scene routing over distance and confidence thresholds.
//!
//! Each proposal falls into one cell of the distance x confidence grid:
//!
//! | | conf >= C | conf < C |
//! |---|---|---|
//! | dist < D | near, clear | near, unclear |
//! | dist >= D | far, clear | far, unclear |
//!
//! Any far/unclear proposal routes the scene to the accuracy-prioritized
//! expert. Otherwise any near/unclear or far/clear proposal routes it to the
//! versatile expert. Scenes made only of near/clear proposals, or with no
//! proposals, go to the latency-prioritized expert.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::amdb::ProposalRegion;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteThresholds {
    pub distance_d: f64,
    pub confidence_c: f64,
}

impl RouteThresholds {
    /// KITTI distance threshold in meters.
    pub const KITTI_DISTANCE: f64 = 23.5;
    pub const NUSCENES_DISTANCE: f64 = 35.0;
    pub const DEFAULT_CONFIDENCE: f64 = 0.5;

    pub fn new(distance_d: f64, confidence_c: f64) -> Result<Self> {
        let th = RouteThresholds {
            distance_d,
            confidence_c,
        };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_d.is_finite() && self.distance_d > 0.0) {
            return Err(Error::Thresholds(format!(
                "distance {} must be positive",
                self.distance_d
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_c) {
            return Err(Error::Thresholds(format!(
                "confidence {} outside [0, 1]",
                self.confidence_c
            )));
        }
        Ok(())
    }
}

impl Default for RouteThresholds {
    fn default() -> Self {
        RouteThresholds {
            distance_d: Self::KITTI_DISTANCE,
            confidence_c: Self::DEFAULT_CONFIDENCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    CloseDistinct,
    MixedVisibility,
    DistantUncertain,
    Emergency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpertKind {
    /// Latency-prioritized, BEV 2D.
    #[serde(rename = "LPE")]
    Lpe,
    /// Versatile efficiency, sparse 3D.
    #[serde(rename = "VEE")]
    Vee,
    /// Accuracy-prioritized, multimodal.
    #[serde(rename = "APE")]
    Ape,
    #[serde(rename = "EmergencyExpert")]
    Emergency,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::Lpe,
        ExpertKind::Vee,
        ExpertKind::Ape,
        ExpertKind::Emergency,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ExpertKind::Lpe => "LPE",
            ExpertKind::Vee => "VEE",
            ExpertKind::Ape => "APE",
            ExpertKind::Emergency => "EmergencyExpert",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl Scenario {
    pub fn expert(self) -> ExpertKind {
        match self {
            Scenario::CloseDistinct => ExpertKind::Lpe,
            Scenario::MixedVisibility => ExpertKind::Vee,
            Scenario::DistantUncertain => ExpertKind::Ape,
            Scenario::Emergency => ExpertKind::Emergency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub scenario: Scenario,
    pub expert: ExpertKind,
    /// Proposals matching the rule that decided the route.
    pub triggering: Vec<usize>,
}

impl RouteDecision {
    fn new(scenario: Scenario, triggering: Vec<usize>) -> Self {
        RouteDecision {
            scenario,
            expert: scenario.expert(),
            triggering,
        }
    }
}

/// Threshold rules alone, without the emergency hook.
pub fn classify_scene(proposals: &[ProposalRegion], th: &RouteThresholds) -> RouteDecision {
    let far = |p: &ProposalRegion| p.centroid_distance >= th.distance_d;
    let clear = |p: &ProposalRegion| p.confidence >= th.confidence_c;
    let matching = |rule: &dyn Fn(&ProposalRegion) -> bool| -> Vec<usize> {
        proposals
            .iter()
            .enumerate()
            .filter(|(_, p)| rule(p))
            .map(|(i, _)| i)
            .collect()
    };

    let distant_uncertain = matching(&|p| far(p) && !clear(p));
    if !distant_uncertain.is_empty() {
        return RouteDecision::new(Scenario::DistantUncertain, distant_uncertain);
    }
    let mixed = matching(&|p| (!far(p) && !clear(p)) || (far(p) && clear(p)));
    if !mixed.is_empty() {
        return RouteDecision::new(Scenario::MixedVisibility, mixed);
    }
    RouteDecision::new(Scenario::CloseDistinct, (0..proposals.len()).collect())
}

pub type ScenePredicate = dyn Fn(&[ProposalRegion]) -> bool + Send + Sync;

/// Token returned by [`Dispatcher::register_emergency_predicate`].
#[derive(Debug, PartialEq, Eq)]
pub struct EmergencyHandle(u64);

struct Registered {
    id: u64,
    pred: Arc<ScenePredicate>,
}

/// Threshold router with an optional emergency override.
pub struct Dispatcher {
    thresholds: RouteThresholds,
    emergency: RwLock<Option<Registered>>,
    next_id: AtomicU64,
}

impl fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dispatcher")
            .field("thresholds", &self.thresholds)
            .field("emergency", &self.has_emergency_predicate())
            .finish()
    }
}

impl Dispatcher {
    pub fn new(thresholds: RouteThresholds) -> Result<Self> {
        thresholds.validate()?;
        Ok(Dispatcher {
            thresholds,
            emergency: RwLock::new(None),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn thresholds(&self) -> &RouteThresholds {
        &self.thresholds
    }

    /// Install a predicate evaluated before the threshold rules. Fails if one
    /// is already installed.
    pub fn register_emergency_predicate<F>(&self, pred: F) -> Result<EmergencyHandle>
    where
        F: Fn(&[ProposalRegion]) -> bool + Send + Sync + 'static,
    {
        let mut slot = self.emergency.write().unwrap_or_else(|e| e.into_inner());
        if slot.is_some() {
            return Err(Error::Conflict);
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        *slot = Some(Registered {
            id,
            pred: Arc::new(pred),
        });
        Ok(EmergencyHandle(id))
    }

    /// Remove the predicate installed under `handle`. Returns false if the
    /// handle is stale.
    pub fn unregister_emergency_predicate(&self, handle: EmergencyHandle) -> bool {
        let mut slot = self.emergency.write().unwrap_or_else(|e| e.into_inner());
        match slot.as_ref() {
            Some(r) if r.id == handle.0 => {
                *slot = None;
                true
            }
            _ => false,
        }
    }

    pub fn has_emergency_predicate(&self) -> bool {
        self.emergency
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .is_some()
    }

    pub fn classify(&self, proposals: &[ProposalRegion]) -> RouteDecision {
        let pred = self
            .emergency
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .as_ref()
            .map(|r| Arc::clone(&r.pred));
        if let Some(pred) = pred {
            if pred(proposals) {
                return RouteDecision::new(Scenario::Emergency, Vec::new());
            }
        }
        classify_scene(proposals, &self.thresholds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteStats {
    pub total: usize,
    /// Indexed like [`ExpertKind::ALL`].
    pub counts: [usize; 4],
    pub fractions: [f64; 4],
}

impl RouteStats {
    pub fn count(&self, expert: ExpertKind) -> usize {
        self.counts[expert.slot()]
    }

    pub fn fraction(&self, expert: ExpertKind) -> f64 {
        self.fractions[expert.slot()]
    }
}

pub fn route_statistics(decisions: &[RouteDecision]) -> RouteStats {
    let mut counts = [0usize; 4];
    for d in decisions {
        counts[d.expert.slot()] += 1;
    }
    let total = decisions.len();
    let fractions = if total == 0 {
        [0.0; 4]
    } else {
        counts.map(|c| c as f64 / total as f64)
    };
    RouteStats {
        total,
        counts,
        fractions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(d: f64, c: f64) -> ProposalRegion {
        ProposalRegion::at_distance(d, c).unwrap()
    }

    #[test]
    fn published_rule_examples() {
        let th = RouteThresholds::new(23.5, 0.5).unwrap();
        let d = classify_scene(&[p(10.0, 0.9)], &th);
        assert_eq!(
            (d.scenario, d.expert),
            (Scenario::CloseDistinct, ExpertKind::Lpe)
        );
        let d = classify_scene(&[p(30.0, 0.9), p(5.0, 0.8)], &th);
        assert_eq!(
            (d.scenario, d.expert),
            (Scenario::MixedVisibility, ExpertKind::Vee)
        );
        assert_eq!(d.triggering, vec![0]);
        let d = classify_scene(&[p(30.0, 0.3)], &th);
        assert_eq!(
            (d.scenario, d.expert),
            (Scenario::DistantUncertain, ExpertKind::Ape)
        );
        let d = classify_scene(&[], &th);
        assert_eq!(
            (d.scenario, d.expert),
            (Scenario::CloseDistinct, ExpertKind::Lpe)
        );
    }

    #[test]
    fn thresholds_validated() {
        assert!(RouteThresholds::new(0.0, 0.5).is_err());
        assert!(RouteThresholds::new(10.0, 1.5).is_err());
        assert_eq!(RouteThresholds::default().distance_d, 23.5);
    }

    #[test]
    fn emergency_predicate_lifecycle() {
        let disp = Dispatcher::new(RouteThresholds::default()).unwrap();
        let scene = [p(10.0, 0.9), p(1.5, 0.9)];
        assert_eq!(disp.classify(&scene).expert, ExpertKind::Lpe);

        let never = disp.register_emergency_predicate(|_| false).unwrap();
        assert_eq!(disp.classify(&scene).expert, ExpertKind::Lpe);
        assert!(matches!(
            disp.register_emergency_predicate(|_| true),
            Err(Error::Conflict)
        ));
        assert!(disp.unregister_emergency_predicate(never));

        let near = disp
            .register_emergency_predicate(|ps| ps.iter().any(|p| p.centroid_distance < 2.0))
            .unwrap();
        let d = disp.classify(&scene);
        assert_eq!(
            (d.scenario, d.expert),
            (Scenario::Emergency, ExpertKind::Emergency)
        );
        assert_eq!(disp.classify(&[p(10.0, 0.9)]).expert, ExpertKind::Lpe);
        assert!(disp.unregister_emergency_predicate(near));
        assert!(!disp.unregister_emergency_predicate(EmergencyHandle(999)));

        let _always = disp.register_emergency_predicate(|_| true).unwrap();
        assert_eq!(disp.classify(&[]).expert, ExpertKind::Emergency);
        assert_eq!(disp.classify(&[p(40.0, 0.1)]).expert, ExpertKind::Emergency);
    }

    #[test]
    fn statistics() {
        let empty = route_statistics(&[]);
        assert_eq!(empty.counts, [0; 4]);
        let lpe = RouteDecision::new(Scenario::CloseDistinct, vec![]);
        let ape = RouteDecision::new(Scenario::DistantUncertain, vec![]);
        let s = route_statistics(&[lpe.clone(), lpe.clone(), lpe, ape]);
        assert_eq!(s.counts, [3, 0, 1, 0]);
        assert_eq!(s.fractions, [0.75, 0.0, 0.25, 0.0]);
    }
}
