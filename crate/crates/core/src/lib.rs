//! Routing by backprop: OSPF link-weight optimization by gradient descent
//! through a learned, differentiable surrogate of shortest-path routing.
//!
//! * [`netgraph`] and [`exact_routing`] hold the network model and the exact
//!   Dijkstra routing used for labels and for every reported utilization.
//! * [`diffcore`] is the reverse-mode engine the surrogate is built on.
//! * [`gnn`] is the encode-process-decode network predicting per-edge path
//!   membership; [`trainer`] fits it to Dijkstra labels on random graphs.
//! * [`optimizer`] runs gradient descent on link weights through the
//!   surrogate; [`localsearch`] is the anytime integer-weight baseline.
//! * [`workbench`] covers file formats, traffic generation, experiments and
//!   the command-line front end.

pub mod diffcore;
pub mod exact_routing;
pub mod gnn;
pub mod localsearch;
pub mod netgraph;
pub mod optimizer;
pub mod trainer;
pub mod workbench;

/// Formats a float with 17 significant digits, enough for exact round trips.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Keeps freed heap memory for reuse instead of returning it to the OS.
///
/// Surrogate evaluation allocates and drops hundreds of megabytes per call;
/// with glibc's default trimming most of the time goes to page faults.
/// Call once at startup. A no-op off glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
