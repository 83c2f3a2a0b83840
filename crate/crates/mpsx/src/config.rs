/// Numerical tolerance and cap settings shared across the pipeline.
///
/// All rank and membership decisions are relative: a quantity counts as zero
/// when it is below `tol` times the natural scale of the problem (largest
/// singular value, input norm, ...). The caps bound the lengths we are willing
/// to probe; the theoretical bounds reported alongside are usually far larger
/// than anything reachable numerically.
#[derive(Debug, Clone, Copy)]
pub struct Config {
    /// Relative tolerance for every rank / membership / residual decision.
    pub tol: f64,
    /// Maximum number of matrices materialized by physical blocking (d^l).
    pub cap_phys: usize,
    /// Maximum length probed in membership searches.
    pub cap_len: usize,
    /// Largest root-of-unity order certified for the proportionality constants.
    pub q_max: usize,
    /// Seed for every randomized search (invariant subspaces, probes).
    pub seed: u64,
    /// Sizes N <= verify_n used for state-level verification.
    pub verify_n: usize,
    /// Maximum number of amplitudes a state generation may produce (d^N).
    pub amp_cap: usize,
    /// Maximum length probed for isolatability and block-injectivity.
    pub len_probe_max: usize,
}

pub const DEFAULT_TOL: f64 = 1e-9;

impl Default for Config {
    fn default() -> Self {
        Config {
            tol: DEFAULT_TOL,
            cap_phys: 4096,
            cap_len: 64,
            q_max: 720,
            seed: 0xC0FFEE,
            verify_n: 6,
            amp_cap: 1 << 20,
            len_probe_max: 16,
        }
    }
}

impl Config {
    pub fn with_tol(tol: f64) -> Self {
        Config {
            tol,
            ..Config::default()
        }
    }
}
