use serde::{Deserialize, Serialize};

/// Role of a vehicle in the platoon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    /// Front vehicle replaying a recorded speed series.
    TrajectoryLeader,
    /// Controlled (autonomous) vehicle.
    Av,
    /// Car-following human driver.
    Human,
}

impl VehicleKind {
    pub fn label(self) -> &'static str {
        match self {
            VehicleKind::TrajectoryLeader => "leader",
            VehicleKind::Av => "av",
            VehicleKind::Human => "human",
        }
    }
}

/// All vehicles share one length (bumper to bumper), in meters.
pub const VEHICLE_LENGTH: f64 = 5.0;

/// Kinematic record for one vehicle at one instant.
///
/// `position` is the front-bumper coordinate in meters (negative during
/// warm-up, before the vehicle reaches the controlled stretch). `gap` is the
/// bumper-to-bumper distance to the vehicle ahead and is `None` for the
/// platoon front. A non-positive gap is a collision fault, never a valid
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: u32,
    pub kind: VehicleKind,
    pub position: f64,
    pub speed: f64,
    /// Acceleration realized over the last integration step.
    pub accel: f64,
    pub gap: Option<f64>,
    pub length: f64,
}

impl VehicleState {
    pub fn new(id: u32, kind: VehicleKind, position: f64, speed: f64) -> Self {
        VehicleState {
            id,
            kind,
            position,
            speed,
            accel: 0.0,
            gap: None,
            length: VEHICLE_LENGTH,
        }
    }

    /// Bumper-to-bumper distance from this vehicle's front to `front`'s rear.
    pub fn gap_to(&self, front: &VehicleState) -> f64 {
        front.position - front.length - self.position
    }
}

/// Recompute the `gap` field for every vehicle from current positions.
/// Index 0 is the platoon front and keeps `gap = None`.
pub fn recompute_gaps(platoon: &mut [VehicleState]) {
    if let Some(front) = platoon.first_mut() {
        front.gap = None;
    }
    for i in 1..platoon.len() {
        let rear_of_front = platoon[i - 1].position - platoon[i - 1].length;
        platoon[i].gap = Some(rear_of_front - platoon[i].position);
    }
}

/// One row of a time-space diagram: a vehicle's kinematic sample at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsdRecord {
    pub vehicle_id: u32,
    pub t: f64,
    pub x: f64,
    pub v: f64,
}
