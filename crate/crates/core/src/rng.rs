use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded random stream. The same seed and the same sequence of calls always
/// produce the same draws.
///
/// Streams are not meant to be shared between concurrent callers; derive an
/// independent substream per worker with [`RngStream::substreams`].
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// `count` independent substreams. Advances this stream by one draw, so
    /// repeated calls yield fresh families.
    pub fn substreams(&mut self, count: usize) -> Vec<RngStream> {
        let base = self.rng.next_u64();
        (0..count as u64).map(|i| RngStream::with_stream(base, i + 1)).collect()
    }

    /// A single fresh substream.
    pub fn fork(&mut self) -> RngStream {
        self.substreams(1).pop().expect("one substream")
    }

    /// Deterministic child keyed by a label, without advancing this stream.
    pub fn derive(seed: u64, label: u64) -> RngStream {
        let mut mixer = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        mixer.set_stream(label);
        RngStream::new(mixer.next_u64())
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
