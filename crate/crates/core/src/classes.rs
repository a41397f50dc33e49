//! The fixed class scheme shared by the scene generator, the network head
//! and the metrics: four foreground classes plus an ignore label.

pub const GROUND: u16 = 0;
pub const VEHICLE: u16 = 1;
pub const POLE: u16 = 2;
pub const BUILDING: u16 = 3;
/// Unlabeled pixels, dropped points and injected weather noise.
pub const IGNORE: u16 = 4;

/// Classes the network predicts.
pub const NUM_FOREGROUND: usize = 4;
/// Foreground classes plus ignore.
pub const NUM_TOTAL: usize = 5;

pub fn name(id: u16) -> &'static str {
    match id {
        GROUND => "ground",
        VEHICLE => "vehicle",
        POLE => "pole",
        BUILDING => "building",
        IGNORE => "ignore",
        _ => "unknown",
    }
}
