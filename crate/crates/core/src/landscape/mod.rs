//! Landscape probes: minimum-energy paths between states and perturbative
//! stability of fixed points.

mod spline;
mod stability;
mod string;

pub use stability::{stability_probe, StabilityConfig, StabilityReport};
pub use string::{
    applicable_swaps, barrier_height, classify_profile, connectivity_suite, string_method, string_method_from,
    swap_via_silent_unit, transfer_path, write_path_csv, ConnectivityResult, PathProfile,
    StringConfig, StringPath, SwapKind,
};
