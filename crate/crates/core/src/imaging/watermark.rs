use serde::{Deserialize, Serialize};

use super::font::{self, GLYPH_H, GLYPH_W};
use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.top < other.bottom() && other.top < self.bottom() && self.left < other.right() && other.left < self.right()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom() && x >= self.left && x < self.right()
    }

    pub(crate) fn check_inside(&self, h: usize, w: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bottom() > h || self.right() > w {
            return Err(Error::OutOfBounds {
                top: self.top,
                left: self.left,
                height: self.height,
                width: self.width,
                image_h: h,
                image_w: w,
            });
        }
        Ok(())
    }
}

/// Text watermark description: one `M`-glyph string repeated in every grid segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WatermarkSpec {
    pub text: String,
    pub glyphs_per_segment: usize,
    pub grid: (usize, usize),
    pub alpha: f64,
    pub foreground: f64,
    pub background: f64,
    /// Explicit `(x, y)` glyph scale; chosen from the segment size when absent.
    #[serde(default)]
    pub scale: Option<(usize, usize)>,
}

impl Default for WatermarkSpec {
    fn default() -> Self {
        Self {
            text: "ABCD".into(),
            glyphs_per_segment: 4,
            grid: (3, 1),
            alpha: 0.4,
            foreground: 1.0,
            background: 0.0,
            scale: None,
        }
    }
}

impl WatermarkSpec {
    pub fn with_text(text: &str) -> Self {
        Self {
            text: text.to_string(),
            glyphs_per_segment: text.chars().count(),
            ..Self::default()
        }
    }

    pub fn segments(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.chars().count() != self.glyphs_per_segment {
            return Err(Error::param(
                "text",
                format!(
                    "{:?} has {} glyphs, expected {}",
                    self.text,
                    self.text.chars().count(),
                    self.glyphs_per_segment
                ),
            ));
        }
        if let Some(c) = self.text.chars().find(|c| font::glyph_index(*c).is_none()) {
            return Err(Error::UnknownGlyph(c));
        }
        if self.segments() == 0 {
            return Err(Error::param("grid", "rows·cols must be at least 1"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("foreground", self.foreground),
            ("background", self.background),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(name, format!("{v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Glyph indices of the text, in reading order.
    pub fn glyph_indices(&self) -> Result<Vec<usize>> {
        self.text
            .chars()
            .map(|c| font::glyph_index(c).ok_or(Error::UnknownGlyph(c)))
            .collect()
    }
}

/// Placement of `M` fixed-width glyph slots inside one segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphGeometry {
    pub glyphs: usize,
    pub origin_y: usize,
    pub origin_x: usize,
    pub scale_x: usize,
    pub scale_y: usize,
    /// Horizontal distance between consecutive slot origins.
    pub pitch: usize,
}

impl GlyphGeometry {
    /// Largest integer scale that fits; vertical scale is capped at twice the horizontal one.
    pub fn fit(seg_h: usize, seg_w: usize, glyphs: usize, scale: Option<(usize, usize)>) -> Result<Self> {
        if glyphs == 0 {
            return Ok(Self {
                glyphs,
                origin_y: 0,
                origin_x: 0,
                scale_x: 1,
                scale_y: 1,
                pitch: GLYPH_W,
            });
        }
        let too_long = Error::TextTooLong {
            glyphs,
            height: seg_h,
            width: seg_w,
        };
        let (sx, sy) = match scale {
            Some(s) => s,
            None => {
                let sx = seg_w / (glyphs * GLYPH_W);
                (sx, (seg_h / GLYPH_H).min(2 * sx))
            }
        };
        if sx == 0 || sy == 0 || glyphs * GLYPH_W * sx > seg_w || GLYPH_H * sy > seg_h {
            return Err(too_long);
        }
        let gap = if glyphs * (GLYPH_W + 1) * sx - sx <= seg_w {
            sx
        } else {
            0
        };
        let pitch = GLYPH_W * sx + gap;
        let text_w = glyphs * pitch - gap;
        Ok(Self {
            glyphs,
            origin_y: (seg_h - GLYPH_H * sy) / 2,
            origin_x: (seg_w - text_w) / 2,
            scale_x: sx,
            scale_y: sy,
            pitch,
        })
    }

    pub fn slot_height(&self) -> usize {
        GLYPH_H * self.scale_y
    }

    pub fn slot_width(&self) -> usize {
        GLYPH_W * self.scale_x
    }

    /// Slot rectangle relative to the segment's top-left corner.
    pub fn slot(&self, m: usize) -> Rect {
        Rect::new(
            self.origin_y,
            self.origin_x + m * self.pitch,
            self.slot_height(),
            self.slot_width(),
        )
    }

    /// Whether pixel `(y, x)` of the slot is lit for glyph `index`.
    pub fn slot_lit(&self, index: usize, y: usize, x: usize) -> bool {
        font::lit(index, y / self.scale_y, x / self.scale_x)
    }
}

/// `K` equally sized, disjoint rectangles inside an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentLayout {
    image_h: usize,
    image_w: usize,
    rects: Vec<Rect>,
}

impl SegmentLayout {
    pub fn new(image_h: usize, image_w: usize, rects: Vec<Rect>) -> Result<Self> {
        if rects.is_empty() {
            return Err(Error::EmptyInput("segment layout"));
        }
        let (h0, w0) = (rects[0].height, rects[0].width);
        for (i, r) in rects.iter().enumerate() {
            r.check_inside(image_h, image_w)?;
            if (r.height, r.width) != (h0, w0) {
                return Err(Error::param("layout", "segments must share dimensions"));
            }
            if rects[..i].iter().any(|o| o.intersects(r)) {
                return Err(Error::param("layout", format!("segment {i} overlaps another")));
            }
        }
        Ok(Self {
            image_h,
            image_w,
            rects,
        })
    }

    /// Uniform `rows × cols` grid; leftover pixels become equal outer margins.
    pub fn grid(rows: usize, cols: usize, image_h: usize, image_w: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::param("grid", "rows and cols must be positive"));
        }
        let (cell_h, cell_w) = (image_h / rows, image_w / cols);
        if cell_h == 0 || cell_w == 0 {
            return Err(Error::InvalidDimensions(format!(
                "{rows}x{cols} grid does not fit {image_h}x{image_w}"
            )));
        }
        let top = (image_h - rows * cell_h) / 2;
        let left = (image_w - cols * cell_w) / 2;
        let rects = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| Rect::new(top + r * cell_h, left + c * cell_w, cell_h, cell_w)))
            .collect();
        Self::new(image_h, image_w, rects)
    }

    pub fn for_spec(spec: &WatermarkSpec, image_h: usize, image_w: usize) -> Result<Self> {
        Self::grid(spec.grid.0, spec.grid.1, image_h, image_w)
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn segment_size(&self) -> (usize, usize) {
        (self.rects[0].height, self.rects[0].width)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        if (x.height(), x.width()) != (self.image_h, self.image_w) {
            return Err(Error::shape((self.image_h, self.image_w), (x.height(), x.width())));
        }
        Ok(())
    }
}

/// Renders the watermark image: background everywhere, the text in every segment.
pub fn render_watermark(
    spec: &WatermarkSpec,
    layout: &SegmentLayout,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Image> {
    spec.validate()?;
    if (height, width) != layout.image_size() {
        return Err(Error::shape(layout.image_size(), (height, width)));
    }
    let mut img = Image::filled(channels, height, width, spec.background)?;
    let (seg_h, seg_w) = layout.segment_size();
    let geom = GlyphGeometry::fit(seg_h, seg_w, spec.glyphs_per_segment, spec.scale)?;
    let glyphs = spec.glyph_indices()?;
    for rect in layout.rects() {
        for (m, &g) in glyphs.iter().enumerate() {
            let slot = geom.slot(m);
            for y in 0..slot.height {
                for x in 0..slot.width {
                    if geom.slot_lit(g, y, x) {
                        let (py, px) = (rect.top + slot.top + y, rect.left + slot.left + x);
                        for c in 0..channels {
                            img.set(c, py, px, spec.foreground);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Blends `patch` into `x` at `corner = (top, left)`: `(1-alpha)·x + alpha·patch`.
pub fn overlay_patch(x: &Image, patch: &Image, corner: (usize, usize), alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", format!("{alpha} outside [0, 1]")));
    }
    if patch.channels() != x.channels() {
        return Err(Error::shape(x.channels(), patch.channels()));
    }
    let rect = Rect::new(corner.0, corner.1, patch.height(), patch.width());
    rect.check_inside(x.height(), x.width())?;
    let mut out = x.clone();
    for c in 0..x.channels() {
        for y in 0..patch.height() {
            for xx in 0..patch.width() {
                let (py, px) = (rect.top + y, rect.left + xx);
                let v = (1.0 - alpha) * x.get(c, py, px) + alpha * patch.get(c, y, xx);
                out.set(c, py, px, v);
            }
        }
    }
    Ok(out)
}

/// The `K` segment sub-images in layout order.
pub fn crop_segments(x: &Image, layout: &SegmentLayout) -> Result<Vec<Image>> {
    layout.check_image(x)?;
    layout.rects().iter().map(|r| x.region(*r)).collect()
}

/// Writes segments back into their rectangles on a copy of `base`.
pub fn paste_segments(base: &Image, segments: &[Image], layout: &SegmentLayout) -> Result<Image> {
    layout.check_image(base)?;
    if segments.len() != layout.len() {
        return Err(Error::shape(layout.len(), segments.len()));
    }
    let mut out = base.clone();
    for (seg, rect) in segments.iter().zip(layout.rects()) {
        if (seg.channels(), seg.height(), seg.width()) != (base.channels(), rect.height, rect.width) {
            return Err(Error::shape((base.channels(), rect.height, rect.width), seg.shape()));
        }
        for c in 0..seg.channels() {
            for y in 0..rect.height {
                for x in 0..rect.width {
                    out.set(c, rect.top + y, rect.left + x, seg.get(c, y, x));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn abcd_renders_nine_identical_blocks() {
        let spec = WatermarkSpec {
            grid: (3, 3),
            ..WatermarkSpec::default()
        };
        let layout = SegmentLayout::for_spec(&spec, 64, 64).unwrap();
        let w = render_watermark(&spec, &layout, 64, 64, 3).unwrap();
        let segs = crop_segments(&w, &layout).unwrap();
        assert_eq!(segs.len(), 9);
        for s in &segs[1..] {
            assert_eq!(s, &segs[0]);
        }
        assert!(w.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(w.mean() > 0.05);
    }

    #[test]
    fn empty_text_renders_background() {
        let spec = WatermarkSpec {
            text: String::new(),
            glyphs_per_segment: 0,
            ..WatermarkSpec::default()
        };
        let layout = SegmentLayout::for_spec(&spec, 32, 32).unwrap();
        let w = render_watermark(&spec, &layout, 32, 32, 1).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rendering_is_deterministic_and_validates_text() {
        let spec = WatermarkSpec::with_text("Q7Z0");
        let layout = SegmentLayout::for_spec(&spec, 64, 64).unwrap();
        let a = render_watermark(&spec, &layout, 64, 64, 3).unwrap();
        let b = render_watermark(&spec, &layout, 64, 64, 3).unwrap();
        assert_eq!(a, b);
        let bad = WatermarkSpec::with_text("ab!d");
        assert!(matches!(
            render_watermark(&bad, &layout, 64, 64, 3),
            Err(Error::UnknownGlyph('a'))
        ));
        let long = WatermarkSpec::with_text("ABCDEFGHIJKLMNOPQRST");
        assert!(matches!(
            render_watermark(&long, &layout, 64, 64, 3),
            Err(Error::TextTooLong { .. })
        ));
    }

    #[test]
    fn geometry_uses_gaps_when_room_allows() {
        let g = GlyphGeometry::fit(66, 173, 4, None).unwrap();
        assert_eq!((g.scale_x, g.scale_y), (8, 9));
        assert_eq!(g.pitch, 40);
        let tight = GlyphGeometry::fit(21, 21, 4, None).unwrap();
        assert_eq!((tight.scale_x, tight.scale_y, tight.pitch), (1, 2, 5));
    }

    #[test]
    fn overlay_boundaries() {
        let x = Image::filled(3, 64, 64, 0.0).unwrap();
        let patch = Image::filled(3, 32, 32, 1.0).unwrap();
        assert_eq!(overlay_patch(&x, &patch, (32, 32), 0.0).unwrap(), x);
        let full = overlay_patch(&x, &patch, (32, 32), 1.0).unwrap();
        assert_eq!(full.region(Rect::new(32, 32, 32, 32)).unwrap(), patch);
        assert_eq!(full.get(0, 0, 0), 0.0);
        let half = overlay_patch(&x, &patch, (32, 32), 0.5).unwrap();
        assert_eq!(half.get(1, 40, 40), 0.5);
        assert!(matches!(
            overlay_patch(&x, &patch, (40, 32), 0.5),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn crop_matches_segment_size_and_identity_layout() {
        let x = Image::filled(3, 66 * 3, 173 * 3, 0.25).unwrap();
        let layout = SegmentLayout::grid(3, 3, 66 * 3, 173 * 3).unwrap();
        let segs = crop_segments(&x, &layout).unwrap();
        assert_eq!(segs.len(), 9);
        assert!(segs.iter().all(|s| (s.height(), s.width()) == (66, 173)));

        let y = Image::new(1, 16, 16, (0..256).map(|v| v as f64 / 255.0).collect()).unwrap();
        let one = SegmentLayout::grid(1, 1, 16, 16).unwrap();
        assert_eq!(crop_segments(&y, &one).unwrap(), vec![y.clone()]);
        assert!(crop_segments(&y, &layout).is_err());
    }

    #[test]
    fn layout_rejects_overlap_and_mixed_sizes() {
        let a = Rect::new(0, 0, 8, 8);
        assert!(SegmentLayout::new(16, 16, vec![a, Rect::new(4, 4, 8, 8)]).is_err());
        assert!(SegmentLayout::new(16, 16, vec![a, Rect::new(8, 8, 4, 8)]).is_err());
        assert!(SegmentLayout::new(16, 16, vec![a, Rect::new(8, 8, 8, 9)]).is_err());
        assert!(SegmentLayout::new(16, 16, vec![a, Rect::new(8, 8, 8, 8)]).is_ok());
    }

    fn arb_image(h: usize, w: usize) -> impl Strategy<Value = Image> {
        proptest::collection::vec(0.0f64..=1.0, 3 * h * w).prop_map(move |d| Image::new(3, h, w, d).unwrap())
    }

    proptest! {
        #[test]
        fn overlay_is_linear_in_alpha(x in arb_image(16, 16), p in arb_image(8, 8), alpha in 0.0f64..=1.0) {
            let o0 = overlay_patch(&x, &p, (4, 6), 0.0).unwrap();
            let o1 = overlay_patch(&x, &p, (4, 6), 1.0).unwrap();
            let oa = overlay_patch(&x, &p, (4, 6), alpha).unwrap();
            for i in 0..oa.data().len() {
                let lin = (1.0 - alpha) * o0.data()[i] + alpha * o1.data()[i];
                prop_assert!((oa.data()[i] - lin).abs() < 1e-12);
            }
        }

        #[test]
        fn crop_then_paste_is_identity(x in arb_image(24, 30), rows in 1usize..4, cols in 1usize..4) {
            let layout = SegmentLayout::grid(rows, cols, 24, 30).unwrap();
            let segs = crop_segments(&x, &layout).unwrap();
            let blank = Image::filled(3, 24, 30, 0.0).unwrap();
            let back = paste_segments(&blank, &segs, &layout).unwrap();
            for r in layout.rects() {
                prop_assert_eq!(back.region(*r).unwrap(), x.region(*r).unwrap());
            }
        }
    }
}
