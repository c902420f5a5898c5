//! Small neural-network toolkit on top of `candle_core`: parameter storage
//! with seeded initialization, the layer types the networks use, and an
//! adaptive-moment optimizer with inspectable state.

mod adam;
mod attention;
mod layers;
pub mod ops;
mod params;
pub mod unfold;

pub use adam::{Adam, AdamConfig};
pub use attention::{attend, SelfAttention, SpatialAttention};
pub use layers::{
    kaiming_std, BatchNorm2d, Conv2d, ConvSpec, ConvTranspose2d, DepthwiseConv3x3, Linear, Padding,
};
pub use params::{Init, ParamStore, Scope};

/// Named intermediate tensor shapes recorded during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    entries: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    pub fn record(&mut self, name: impl Into<String>, t: &candle_core::Tensor) {
        self.entries.push((name.into(), t.dims().to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }
}

pub(crate) fn trace(trace: &mut Option<&mut ShapeTrace>, name: &str, t: &candle_core::Tensor) {
    if let Some(tr) = trace.as_deref_mut() {
        tr.record(name, t);
    }
}
