//! The shipped desk benchmark: six routes (two straight, two turning, two
//! signalized with crossing pedestrians), embedded at build time and also
//! available as editable TOML under `crates/core/routes/`.

use super::world::World;
use crate::error::{Error, Result};

pub const DESK_ROUTE_NAMES: [&str; 6] = [
    "straight_clear",
    "straight_traffic",
    "turn_left",
    "turn_right",
    "signal_ped_a",
    "signal_ped_b",
];

const SOURCES: [(&str, &str); 6] = [
    ("straight_clear", include_str!("../../routes/straight_clear.toml")),
    ("straight_traffic", include_str!("../../routes/straight_traffic.toml")),
    ("turn_left", include_str!("../../routes/turn_left.toml")),
    ("turn_right", include_str!("../../routes/turn_right.toml")),
    ("signal_ped_a", include_str!("../../routes/signal_ped_a.toml")),
    ("signal_ped_b", include_str!("../../routes/signal_ped_b.toml")),
];

/// Load one builtin route by name.
pub fn builtin(name: &str) -> Result<World> {
    let (_, text) = SOURCES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::World(format!("unknown builtin route {name:?}")))?;
    World::from_toml(text)
}

/// The full desk benchmark set.
pub fn desk_benchmark() -> Vec<World> {
    DESK_ROUTE_NAMES
        .iter()
        .map(|n| builtin(n).expect("embedded routes parse"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtin_routes_parse_and_validate() {
        for name in DESK_ROUTE_NAMES {
            let w = builtin(name).unwrap();
            assert_eq!(w.name, name);
            assert!(w.route.points.len() >= 2);
        }
        assert!(builtin("nope").is_err());
    }

    #[test]
    fn benchmark_has_promised_composition() {
        let worlds = desk_benchmark();
        assert_eq!(worlds.len(), 6);
        let signals: usize = worlds.iter().filter(|w| !w.signals.is_empty()).count();
        let peds: usize = worlds.iter().filter(|w| !w.pedestrians.is_empty()).count();
        assert_eq!(signals, 2);
        assert!(peds >= 2);
    }
}
