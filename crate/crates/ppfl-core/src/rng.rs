//! Keyed random substreams.
//!
//! Every source of randomness in an experiment is a ChaCha stream derived
//! from `(experiment seed, domain, client, round)`. Clients and rounds own
//! disjoint substreams, so concurrent client execution cannot perturb
//! reproducibility and noise is never reused across `(client, round)`
//! pairs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a substream is used for. Each domain gets statistically
/// independent draws even for identical `(client, round)` keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    /// Server-side initialization of shared parameters.
    SharedInit = 1,
    /// Per-client initialization of personalized parameters.
    PersonalInit = 2,
    /// Minibatch shuffling during local training.
    Minibatch = 3,
    /// Laplace noise added to a shared-layer update.
    Noise = 4,
    /// Weather process shared by all synthetic clients.
    SynthWeather = 5,
    /// Per-client load noise in the synthetic generator.
    SynthLoad = 6,
    /// Per-client static building features.
    SynthStatics = 7,
}

// SplitMix64 finalizer, used as a keyed hash chain.
fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the ChaCha substream for `(seed, domain, client, round)`.
pub fn substream(seed: u64, domain: StreamDomain, client: u64, round: u64) -> ChaCha12Rng {
    let mut state = mix(seed);
    for word in [domain as u64, client, round] {
        state = mix(state ^ mix(word));
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&mix(state.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
