use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::Result;

/// The single RNG type used across the crate. ChaCha exposes its full
/// position, which lets checkpoints restore a stream exactly.
pub type MemrRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> MemrRng {
    MemrRng::seed_from_u64(seed)
}

pub(crate) fn write_rng(w: &mut Writer, rng: &MemrRng) {
    w.put_bytes(&rng.get_seed());
    w.put_u64(rng.get_stream());
    let pos = rng.get_word_pos();
    w.put_u64(pos as u64);
    w.put_u64((pos >> 64) as u64);
}

pub(crate) fn read_rng(r: &mut Reader<'_>) -> Result<MemrRng> {
    let seed_bytes = r.bytes(32)?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(seed_bytes);
    let stream = r.u64()?;
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    let mut rng = MemrRng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(lo | (hi << 64));
    Ok(rng)
}
