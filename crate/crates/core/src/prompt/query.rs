use crate::error::Result;
use crate::model::{DpatModel, VideoClip};

/// Input-conditioned query `q(x)`: the frame-mean class-token feature of
/// the plain frozen backbone. Depends on frozen weights only.
pub fn query_fn(clip: &VideoClip, model: &DpatModel) -> Result<Vec<f64>> {
    let tokens = model.embed(clip)?;
    model.plain_features(&tokens)
}
