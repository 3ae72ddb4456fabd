use std::collections::BTreeMap;

use serde::Serialize;

use crate::conflict::{
    estimate_initial_slots, resolve_intersection, zone_crossing, AircraftId, IntersectionSlot, PassingOrder,
    ZoneCrossing,
};
use crate::error::{Error, Result};
use crate::trajectory::{build_reference, PolySpline, ZonePin};

use super::scenario::{Policy, Scenario};

/// Estimated and scheduled occupancy of one zone by one aircraft.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotRecord {
    pub aircraft: AircraftId,
    pub zone: u32,
    pub estimated: IntersectionSlot,
    pub scheduled: IntersectionSlot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AircraftPlan {
    pub id: AircraftId,
    pub spline: PolySpline,
    /// Zone crossings along the route, by increasing arc length.
    pub crossings: Vec<ZoneCrossing>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub policy: Policy,
    /// In scenario order.
    pub aircraft: Vec<AircraftPlan>,
    pub slots: Vec<SlotRecord>,
    /// Passing order per zone; only filled for `safe_taxi`.
    pub orders: BTreeMap<u32, PassingOrder>,
}

impl Plan {
    pub fn aircraft(&self, id: AircraftId) -> Option<&AircraftPlan> {
        self.aircraft.iter().find(|a| a.id == id)
    }

    pub fn slot(&self, id: AircraftId, zone: u32) -> Option<&SlotRecord> {
        self.slots.iter().find(|s| s.aircraft == id && s.zone == zone)
    }
}

/// Slot estimation, conflict resolution (for `safe_taxi`) and reference
/// generation for every aircraft.
///
/// Zones are resolved in order of their earliest estimated entry. Delay
/// assigned at one zone carries over to the estimates of later zones on the
/// same route. The other policies pin each crossing at its estimate.
pub fn plan_phase(scenario: &Scenario) -> Result<Plan> {
    scenario.validate()?;
    let mut estimates: BTreeMap<u32, Vec<IntersectionSlot>> = BTreeMap::new();
    let mut crossings: BTreeMap<AircraftId, Vec<ZoneCrossing>> = BTreeMap::new();
    for a in &scenario.aircraft {
        let list = crossings.entry(a.id).or_default();
        for z in &scenario.zones {
            if let Some(slot) = estimate_initial_slots(a.id, &a.route, a.params.operating_speed, z, 0.0)? {
                estimates.entry(z.id).or_default().push(slot);
                list.push(zone_crossing(&a.route, z).expect("slot implies crossing"));
            }
        }
        list.sort_by(|x, y| x.s_in.total_cmp(&y.s_in));
    }

    let mut zone_order: Vec<u32> = estimates.keys().copied().collect();
    zone_order.sort_by(|a, b| {
        let first = |z: &u32| estimates[z].iter().map(|s| s.t_in).fold(f64::INFINITY, f64::min);
        first(a).total_cmp(&first(b)).then(a.cmp(b))
    });

    let priorities: BTreeMap<AircraftId, u32> =
        scenario.aircraft.iter().map(|a| (a.id, a.params.priority)).collect();
    let mut delay: BTreeMap<AircraftId, f64> = BTreeMap::new();
    let mut slots = Vec::new();
    let mut orders = BTreeMap::new();
    for zone in zone_order {
        let estimated = &estimates[&zone];
        if scenario.policy != Policy::SafeTaxi {
            slots.extend(estimated.iter().map(|&s| SlotRecord {
                aircraft: s.aircraft,
                zone,
                estimated: s,
                scheduled: s,
            }));
            continue;
        }
        let delayed: Vec<IntersectionSlot> = estimated
            .iter()
            .map(|s| {
                let d = delay.get(&s.aircraft).copied().unwrap_or(0.0);
                IntersectionSlot {
                    t_in: s.t_in + d,
                    t_out: s.t_out + d,
                    ..*s
                }
            })
            .collect();
        let resolution = resolve_intersection(
            &delayed,
            &priorities,
            scenario.dt_safe,
            scenario.seed,
            scenario.slot_spacing,
        )?;
        for (est, late) in estimated.iter().zip(&delayed) {
            let scheduled = *resolution.slot(est.aircraft).unwrap_or(late);
            delay.insert(est.aircraft, scheduled.t_in - est.t_in);
            slots.push(SlotRecord {
                aircraft: est.aircraft,
                zone,
                estimated: *est,
                scheduled,
            });
        }
        orders.insert(zone, resolution.order);
    }

    let mut aircraft = Vec::with_capacity(scenario.aircraft.len());
    for a in &scenario.aircraft {
        let list = crossings.remove(&a.id).unwrap_or_default();
        let pins: Vec<ZonePin> = list
            .iter()
            .map(|c| {
                let s = slots
                    .iter()
                    .find(|s| s.aircraft == a.id && s.zone == c.zone)
                    .ok_or(Error::MissingSlot(a.id))?;
                Ok(ZonePin {
                    crossing: *c,
                    t_in: s.scheduled.t_in,
                    t_out: s.scheduled.t_out,
                })
            })
            .collect::<Result<_>>()?;
        let mut options = scenario.reference;
        if options.start_speed.is_none() {
            options.start_speed = Some(a.initial_speed);
        }
        let spline = build_reference(a.id, &a.route, &pins, a.params.operating_speed, 0.0, &options)?;
        aircraft.push(AircraftPlan {
            id: a.id,
            spline,
            crossings: list,
        });
    }
    Ok(Plan {
        policy: scenario.policy,
        aircraft,
        slots,
        orders,
    })
}
