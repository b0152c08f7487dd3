use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::image::ImageBuffer;
use crate::photometric::build_pyramid;

/// One training sample: target frame, its source frames and per-scale pyramids.
#[derive(Clone, Debug)]
pub struct SampleBundle {
    target: Vec<ImageBuffer>,
    sources: Vec<Vec<ImageBuffer>>,
    intrinsics: Vec<Intrinsics>,
}

impl SampleBundle {
    pub fn new(
        target: ImageBuffer,
        sources: Vec<ImageBuffer>,
        intrinsics: Intrinsics,
        scales: usize,
    ) -> Result<Self> {
        intrinsics.validate()?;
        if sources.is_empty() {
            return Err(Error::InvalidConfig("a sample needs at least one source frame".into()));
        }
        if target.width() != intrinsics.width || target.height() != intrinsics.height {
            return Err(Error::ShapeMismatch(format!(
                "target {}x{} vs intrinsics {}x{}",
                target.width(),
                target.height(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        for (i, s) in sources.iter().enumerate() {
            if !s.same_shape(&target) {
                return Err(Error::ShapeMismatch(format!("source {i} differs from target")));
            }
        }
        let intrinsics = (0..scales)
            .map(|r| intrinsics.at_level(r))
            .collect::<Result<Vec<_>>>()?;
        let target = build_pyramid(&target, scales)?;
        let sources = sources
            .iter()
            .map(|s| build_pyramid(s, scales))
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleBundle {
            target,
            sources,
            intrinsics,
        })
    }

    pub fn scales(&self) -> usize {
        self.target.len()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn target(&self, scale: usize) -> &ImageBuffer {
        &self.target[scale]
    }

    pub fn source(&self, source: usize, scale: usize) -> &ImageBuffer {
        &self.sources[source][scale]
    }

    pub fn intrinsics(&self, scale: usize) -> &Intrinsics {
        &self.intrinsics[scale]
    }

    pub fn width(&self) -> usize {
        self.intrinsics[0].width
    }

    pub fn height(&self) -> usize {
        self.intrinsics[0].height
    }

    /// Same frames with the source list reordered.
    pub fn permuted(&self, order: &[usize]) -> Self {
        SampleBundle {
            target: self.target.clone(),
            sources: order.iter().map(|&i| self.sources[i].clone()).collect(),
            intrinsics: self.intrinsics.clone(),
        }
    }
}
