//! Shared fixture for the gradient-route benchmarks: the default network,
//! freshly initialized parameters, and one generated site to draw
//! minibatches from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sitestream_core::model::{Network, ParamVector, Subject};
use sitestream_core::sitegen::{default_stream, generate_site};

pub struct GradFixture {
    pub net: Network,
    pub params: ParamVector,
    pub subjects: Vec<Subject>,
}

impl GradFixture {
    pub fn new(seed: u64) -> GradFixture {
        let net = Network::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net.init(&mut rng);
        let spec = default_stream(1, seed)[0];
        let ds = generate_site(&spec, net.h, net.w).expect("site generation");
        GradFixture {
            net,
            params,
            subjects: ds.train,
        }
    }

    /// A batch of `n` subjects starting at `start`, wrapping around.
    pub fn batch(&self, start: usize, n: usize) -> Vec<&Subject> {
        (start..start + n)
            .map(|i| &self.subjects[i % self.subjects.len()])
            .collect()
    }
}
