//! Frustrated spin chains: the chirality order parameter, discrete energies and
//! their minimizers, analytic transition profiles and the continuum problems
//! they converge to.

pub mod acceptance;
pub mod continuum;
pub mod energies;
pub mod error;
pub mod geometry;
pub mod io;
pub mod minimize;
mod optim;
pub mod penalty;
pub mod profiles;
pub mod sweep;
pub mod sum;

pub use error::{Error, Result};
pub use geometry::Vec3;

/// Run `f` on a pool of `threads` workers, or on the calling thread when `threads <= 1`.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    #[cfg(feature = "parallel")]
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        return Ok(pool.install(f));
    }
    let _ = threads;
    Ok(f())
}
