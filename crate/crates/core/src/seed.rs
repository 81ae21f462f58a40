//! Root-seed derivation. Every random stream in a run comes from one `u64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable overriding the configured root seed.
pub const SEED_ENV: &str = "SFIR_REVERB_SEED";

/// Independent ChaCha streams of one root seed. The dataset split uses the
/// root seed's stream 0 directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// `SFIR_REVERB_SEED` when set, else `configured`. A value that is not a
/// `u64` is reported rather than ignored.
pub fn seed_from_env(configured: u64) -> crate::Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| crate::Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}
