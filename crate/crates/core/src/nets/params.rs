use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// One named block of a [`ParameterVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered segment table; offsets tile `0..len` without gaps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    /// Lay out `(name, shape)` blocks back to back.
    pub fn from_shapes<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let segments = blocks
            .into_iter()
            .map(|(name, shape)| {
                let s = Segment {
                    name: name.into(),
                    shape,
                    offset,
                };
                offset += s.len();
                s
            })
            .collect();
        Layout { segments }
    }

    /// Accepts an explicit table only if it tiles the buffer exactly.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut expect = 0;
        for s in &segments {
            if s.offset != expect {
                return Err(Error::Config(format!(
                    "segment {} starts at {} but previous block ends at {expect}",
                    s.name, s.offset
                )));
            }
            expect += s.len();
        }
        Ok(Layout { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Flat parameter buffer with a named segment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    layout: Layout,
    data: Vec<f64>,
}

impl ParameterVector {
    pub fn new(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if layout.len() != data.len() {
            return Err(Error::Mismatch {
                what: "parameter buffer length",
                expected: layout.len(),
                got: data.len(),
            });
        }
        Ok(ParameterVector { layout, data })
    }

    pub fn zeros(layout: Layout) -> Self {
        let data = vec![0.0; layout.len()];
        ParameterVector { layout, data }
    }

    pub fn filled(layout: Layout, value: f64) -> Self {
        let data = vec![value; layout.len()];
        ParameterVector { layout, data }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.data[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.get(name)?.range();
        Some(&mut self.data[r])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One tensor per segment, in layout order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layout
            .segments
            .iter()
            .map(|s| {
                Tensor::new(s.shape.clone(), self.data[s.range()].to_vec())
                    .expect("segment shape matches its extent")
            })
            .collect()
    }

    /// Rebuild from per-segment tensors produced for this layout.
    pub fn from_tensors(layout: Layout, parts: &[Tensor]) -> Result<Self> {
        if parts.len() != layout.segments.len() {
            return Err(Error::Mismatch {
                what: "segment count",
                expected: layout.segments.len(),
                got: parts.len(),
            });
        }
        let mut data = Vec::with_capacity(layout.len());
        for (s, t) in layout.segments.iter().zip(parts) {
            if t.numel() != s.len() {
                return Err(Error::Mismatch {
                    what: "segment size",
                    expected: s.len(),
                    got: t.numel(),
                });
            }
            data.extend_from_slice(t.data());
        }
        Ok(ParameterVector { layout, data })
    }

    /// Put every segment on `g`, as trainable leaves or as constants.
    pub fn to_graph(&self, g: &Graph, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect()
    }

    /// Read values of segment vars back into a vector with this layout.
    pub fn from_graph(layout: Layout, g: &Graph, vars: &[Var]) -> Result<Self> {
        let parts = vars.iter().map(|&v| g.value(v)).collect::<Result<Vec<_>, _>>()?;
        Self::from_tensors(layout, &parts)
    }
}

/// Slice a flat `[len]` var into the segments of `layout`.
pub fn split_flat(g: &Graph, flat: Var, layout: &Layout) -> Result<Vec<Var>> {
    let n = g.shape(flat)?.iter().product::<usize>();
    if n != layout.len() {
        return Err(Error::Mismatch {
            what: "flat parameter length",
            expected: layout.len(),
            got: n,
        });
    }
    layout
        .segments
        .iter()
        .map(|s| Ok(g.slice(flat, s.offset, &s.shape)?))
        .collect()
}
