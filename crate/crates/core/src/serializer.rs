//! Reading orders over OCR words: the raster-scan baseline, an XY-cut layout
//! parser with alignment-based table detection, and order-recovery metrics.

use serde::{Deserialize, Serialize};

use crate::doc::{is_permutation, union_bbox, BBox, Document, Segment, SegmentKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMethod {
    RasterScan,
    LayoutParse,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadingOrder {
    pub permutation: Vec<usize>,
    pub method: OrderMethod,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderQuality {
    pub kendall_tau: f64,
    pub pair_accuracy: f64,
    pub exact_match: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SerializerConfig {
    /// Two words share a line when their vertical overlap is at least this
    /// fraction of the smaller height.
    pub line_overlap: f64,
    /// XY-cut only splits along empty bands strictly wider than this.
    pub gap_threshold: i32,
    /// Minimum Jaccard overlap between a row's x-interval and a column.
    pub table_jaccard: f64,
}

impl Default for SerializerConfig {
    fn default() -> Self {
        SerializerConfig {
            line_overlap: 0.5,
            gap_threshold: 12,
            table_jaccard: 0.5,
        }
    }
}

fn same_line(a: &BBox, b: &BBox, ratio: f64) -> bool {
    let intersects = a.y0().max(b.y0()) <= a.y1().min(b.y1());
    intersects && a.vertical_overlap(b) as f64 >= ratio * a.h().min(b.h()) as f64
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups the items `ids` (indices into `boxes`) into text lines. Lines come
/// back sorted by vertical center, items within a line by `x0`, ties by
/// index.
pub fn group_lines(boxes: &[BBox], ids: &[usize], overlap: f64) -> Vec<Vec<usize>> {
    let mut by_top: Vec<usize> = (0..ids.len()).collect();
    by_top.sort_by_key(|&k| (boxes[ids[k]].y0(), ids[k]));
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    for (a, &ka) in by_top.iter().enumerate() {
        let ba = &boxes[ids[ka]];
        for &kb in &by_top[a + 1..] {
            let bb = &boxes[ids[kb]];
            if bb.y0() > ba.y1() {
                break;
            }
            if same_line(ba, bb, overlap) {
                let (ra, rb) = (find(&mut parent, ka), find(&mut parent, kb));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); ids.len()];
    for k in 0..ids.len() {
        let r = find(&mut parent, k);
        groups[r].push(ids[k]);
    }
    let mut lines: Vec<(i32, usize, Vec<usize>)> = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|mut g| {
            g.sort_by_key(|&i| (boxes[i].x0(), i));
            let (y0, y1) = g.iter().fold((i32::MAX, i32::MIN), |(lo, hi), &i| {
                (lo.min(boxes[i].y0()), hi.max(boxes[i].y1()))
            });
            let first = *g.iter().min().unwrap();
            (y0 + y1, first, g)
        })
        .collect();
    lines.sort_by_key(|(c, first, _)| (*c, *first));
    lines.into_iter().map(|(_, _, g)| g).collect()
}

fn raster_ids(boxes: &[BBox], ids: &[usize], cfg: &SerializerConfig) -> Vec<usize> {
    group_lines(boxes, ids, cfg.line_overlap).concat()
}

pub fn raster_scan_order(doc: &Document) -> ReadingOrder {
    raster_scan_order_with(doc, &SerializerConfig::default())
}

pub fn raster_scan_order_with(doc: &Document, cfg: &SerializerConfig) -> ReadingOrder {
    let ids: Vec<usize> = (0..doc.len()).collect();
    ReadingOrder {
        permutation: raster_ids(&doc.boxes(), &ids, cfg),
        method: OrderMethod::RasterScan,
    }
}

/// Merges `[start, end]` intervals whose separation is at most `slack`.
fn merge_intervals(mut spans: Vec<(i32, i32)>, slack: i32) -> Vec<(i32, i32)> {
    spans.sort_unstable();
    let mut out: Vec<(i32, i32)> = Vec::new();
    for (s, e) in spans {
        match out.last_mut() {
            Some(last) if s - last.1 <= slack => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    /// Cut along an empty horizontal band: top part first.
    Horizontal,
    /// Cut along an empty vertical band: left part first.
    Vertical,
}

/// The widest empty band wider than the threshold, preferring horizontal
/// bands and then the earliest position on ties. Returns the axis and the
/// coordinate where the band starts.
fn best_cut(boxes: &[BBox], ids: &[usize], threshold: i32) -> Option<(Axis, i32)> {
    let mut best: Option<(i32, Axis, i32)> = None;
    for axis in [Axis::Horizontal, Axis::Vertical] {
        let spans = ids
            .iter()
            .map(|&i| match axis {
                Axis::Horizontal => (boxes[i].y0(), boxes[i].y1()),
                Axis::Vertical => (boxes[i].x0(), boxes[i].x1()),
            })
            .collect();
        let merged = merge_intervals(spans, 0);
        for pair in merged.windows(2) {
            let width = pair[1].0 - pair[0].1;
            if width > threshold && best.is_none_or(|(w, _, _)| width > w) {
                best = Some((width, axis, pair[0].1));
            }
        }
    }
    best.map(|(_, axis, at)| (axis, at))
}

fn jaccard(a: (i32, i32), b: (i32, i32)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union == 0 {
        if a == b {
            1.0
        } else {
            0.0
        }
    } else {
        inter as f64 / union as f64
    }
}

/// Row-major cells of a table, or `None` when the items do not form an
/// aligned grid.
fn detect_table(boxes: &[BBox], ids: &[usize], cfg: &SerializerConfig) -> Option<Vec<Vec<usize>>> {
    let thr = cfg.gap_threshold;
    let bands = merge_intervals(ids.iter().map(|&i| (boxes[i].y0(), boxes[i].y1())).collect(), thr);
    let columns = merge_intervals(ids.iter().map(|&i| (boxes[i].x0(), boxes[i].x1())).collect(), thr);
    if bands.len() < 2 || columns.len() < 2 {
        return None;
    }
    let in_span = |v: (i32, i32), s: (i32, i32)| v.0 >= s.0 && v.1 <= s.1;
    let mut multi_rows = 0;
    let mut cells = Vec::new();
    for &band in &bands {
        let row: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&i| in_span((boxes[i].y0(), boxes[i].y1()), band))
            .collect();
        let intervals = merge_intervals(row.iter().map(|&i| (boxes[i].x0(), boxes[i].x1())).collect(), thr);
        let mut matched = 0;
        for iv in &intervals {
            if !columns.iter().any(|&c| jaccard(*iv, c) >= cfg.table_jaccard) {
                return None;
            }
            matched += 1;
        }
        if matched >= 2 {
            multi_rows += 1;
        }
        for &col in &columns {
            let cell: Vec<usize> = row
                .iter()
                .copied()
                .filter(|&i| in_span((boxes[i].x0(), boxes[i].x1()), col))
                .collect();
            if !cell.is_empty() {
                cells.push(raster_ids(boxes, &cell, cfg));
            }
        }
    }
    (multi_rows >= 2).then_some(cells)
}

enum Block {
    Leaf(Vec<usize>),
    Table(Vec<Vec<usize>>),
}

/// Recursive XY-cut. Blocks are emitted in reading order: top before bottom,
/// left before right. With `tables`, every node is tested for a grid before
/// it is cut further.
fn xy_cut(boxes: &[BBox], ids: Vec<usize>, cfg: &SerializerConfig, tables: bool, out: &mut Vec<Block>) {
    if ids.is_empty() {
        return;
    }
    if tables && ids.len() > 1 {
        if let Some(cells) = detect_table(boxes, &ids, cfg) {
            out.push(Block::Table(cells));
            return;
        }
    }
    match best_cut(boxes, &ids, cfg.gap_threshold) {
        None => out.push(Block::Leaf(ids)),
        Some((axis, at)) => {
            let (first, second): (Vec<usize>, Vec<usize>) = ids.into_iter().partition(|&i| match axis {
                Axis::Horizontal => boxes[i].y1() <= at,
                Axis::Vertical => boxes[i].x1() <= at,
            });
            xy_cut(boxes, first, cfg, tables, out);
            xy_cut(boxes, second, cfg, tables, out);
        }
    }
}

pub fn layout_parse(doc: &Document) -> Vec<Segment> {
    layout_parse_with(doc, &SerializerConfig::default())
}

/// Segments the page into paragraphs and table cells. Segments come back in
/// reading order, each with its words in raster order.
pub fn layout_parse_with(doc: &Document, cfg: &SerializerConfig) -> Vec<Segment> {
    let boxes = doc.boxes();
    let mut blocks = Vec::new();
    xy_cut(&boxes, (0..doc.len()).collect(), cfg, true, &mut blocks);
    let segment = |kind, word_ids: Vec<usize>| {
        let bbox = union_bbox(&word_ids.iter().map(|&i| boxes[i]).collect::<Vec<_>>())
            .expect("xy-cut blocks are non-empty");
        Segment { kind, word_ids, bbox }
    };
    let mut segments = Vec::new();
    for block in blocks {
        match block {
            Block::Leaf(ids) => segments.push(segment(SegmentKind::Paragraph, raster_ids(&boxes, &ids, cfg))),
            Block::Table(cells) => {
                segments.extend(cells.into_iter().map(|c| segment(SegmentKind::TableCell, c)));
            }
        }
    }
    segments
}

pub fn reading_order(doc: &Document, segments: &[Segment]) -> Result<ReadingOrder> {
    reading_order_with(doc, segments, &SerializerConfig::default())
}

/// Orders segments by XY-cut over their boxes, treating each run of
/// consecutive table cells as one unit whose cells are read row-major, and
/// reads each segment in raster order.
pub fn reading_order_with(doc: &Document, segments: &[Segment], cfg: &SerializerConfig) -> Result<ReadingOrder> {
    let n = doc.len();
    let all: Vec<usize> = segments.iter().flat_map(|s| s.word_ids.iter().copied()).collect();
    if !is_permutation(&all, n) {
        return Err(Error::InvalidArgument(format!(
            "segments do not partition the {n} words of the document"
        )));
    }
    let boxes = doc.boxes();
    let seg_boxes: Vec<BBox> = segments
        .iter()
        .map(|s| union_bbox(&s.word_ids.iter().map(|&i| boxes[i]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;

    // Units are runs of segment indices; table runs have more than one member.
    let mut units: Vec<Vec<usize>> = Vec::new();
    for (s, seg) in segments.iter().enumerate() {
        let extend = seg.kind == SegmentKind::TableCell
            && s > 0
            && segments[s - 1].kind == SegmentKind::TableCell;
        match units.last_mut() {
            Some(u) if extend => u.push(s),
            _ => units.push(vec![s]),
        }
    }
    let unit_boxes: Vec<BBox> = units
        .iter()
        .map(|u| union_bbox(&u.iter().map(|&s| seg_boxes[s]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;

    let mut blocks = Vec::new();
    xy_cut(&unit_boxes, (0..units.len()).collect(), cfg, false, &mut blocks);
    let mut permutation = Vec::with_capacity(n);
    for block in blocks {
        let Block::Leaf(mut ids) = block else {
            unreachable!("table detection is off for unit cuts")
        };
        ids.sort_by_key(|&u| (unit_boxes[u].center2_y(), unit_boxes[u].x0(), u));
        for u in ids {
            let cells = if segments[units[u][0]].kind == SegmentKind::TableCell {
                group_lines(&seg_boxes, &units[u], cfg.line_overlap).concat()
            } else {
                units[u].clone()
            };
            for s in cells {
                permutation.extend(raster_ids(&boxes, &segments[s].word_ids, cfg));
            }
        }
    }
    Ok(ReadingOrder {
        permutation,
        method: OrderMethod::LayoutParse,
    })
}

/// Layout parse followed by reading order.
pub fn layout_order(doc: &Document) -> ReadingOrder {
    let segments = layout_parse(doc);
    reading_order(doc, &segments).expect("layout_parse partitions the words")
}

/// Pairwise agreement of `pred` with `gold`. Fewer than two items count as
/// perfectly concordant.
pub fn order_quality(pred: &[usize], gold: &[usize]) -> Result<OrderQuality> {
    let n = gold.len();
    if pred.len() != n {
        return Err(Error::InvalidArgument(format!(
            "predicted order has {} items, gold has {n}",
            pred.len()
        )));
    }
    if !is_permutation(pred, n) || !is_permutation(gold, n) {
        return Err(Error::InvalidArgument("orders must be permutations".into()));
    }
    let mut rank = vec![0usize; n];
    for (r, &item) in pred.iter().enumerate() {
        rank[item] = r;
    }
    // Pairs in gold order are discordant when pred inverts them.
    let mut discordant = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            if rank[gold[a]] > rank[gold[b]] {
                discordant += 1;
            }
        }
    }
    let total = n * n.saturating_sub(1) / 2;
    let (kendall_tau, pair_accuracy) = if total == 0 {
        (1.0, 1.0)
    } else {
        let d = discordant as f64 / total as f64;
        (1.0 - 2.0 * d, 1.0 - d)
    };
    Ok(OrderQuality {
        kendall_tau,
        pair_accuracy,
        exact_match: pred == gold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::Word;
    use proptest::prelude::*;

    fn doc(boxes: &[(i32, i32, i32, i32)]) -> Document {
        let words = boxes
            .iter()
            .enumerate()
            .map(|(i, &(a, b, c, d))| Word::new(format!("w{i}"), BBox::new(a, b, c, d).unwrap()).unwrap())
            .collect();
        Document::new(words, (1000, 1000))
    }

    #[test]
    fn raster_sorts_line_by_x() {
        let d = doc(&[(300, 10, 340, 24), (100, 10, 140, 24), (500, 10, 540, 24)]);
        assert_eq!(raster_scan_order(&d).permutation, [1, 0, 2]);
        assert_eq!(raster_scan_order(&doc(&[(0, 0, 5, 5)])).permutation, [0]);
        assert!(raster_scan_order(&doc(&[])).permutation.is_empty());
    }

    #[test]
    fn raster_interleaves_columns() {
        // Column 2 starts slightly above column 1's second line.
        let d = doc(&[(100, 100, 150, 114), (100, 120, 150, 134), (600, 102, 650, 116), (600, 122, 650, 136)]);
        assert_eq!(raster_scan_order(&d).permutation, [0, 2, 1, 3]);
        assert_eq!(layout_order(&d).permutation, [0, 1, 2, 3]);
    }

    #[test]
    fn half_overlap_groups_but_less_does_not() {
        let d = doc(&[(0, 0, 10, 10), (20, 5, 30, 15)]);
        assert_eq!(group_lines(&d.boxes(), &[0, 1], 0.5).len(), 1);
        let d = doc(&[(0, 0, 10, 10), (20, 6, 30, 16)]);
        assert_eq!(group_lines(&d.boxes(), &[0, 1], 0.5).len(), 2);
    }

    #[test]
    fn two_paragraphs_split() {
        let d = doc(&[(10, 10, 60, 24), (70, 10, 120, 24), (10, 224, 60, 238), (70, 224, 120, 238)]);
        let segs = layout_parse(&d);
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.kind == SegmentKind::Paragraph));
        assert_eq!(segs[0].word_ids, [0, 1]);
    }

    #[test]
    fn grid_with_multiline_cell() {
        // 2x2 table; cell (0,0) wraps onto a second line.
        let d = doc(&[
            (100, 100, 180, 114),
            (400, 100, 470, 114),
            (100, 120, 160, 134),
            (100, 170, 170, 184),
            (400, 170, 480, 184),
        ]);
        let segs = layout_parse(&d);
        assert_eq!(segs.len(), 4);
        assert!(segs.iter().all(|s| s.kind == SegmentKind::TableCell));
        assert_eq!(segs[0].word_ids, [0, 2]);
        // Raster reads the second line of the first cell after the
        // neighbouring cell; layout order keeps the cell together.
        assert_eq!(raster_scan_order(&d).permutation, [0, 1, 2, 3, 4]);
        assert_eq!(layout_order(&d).permutation, [0, 2, 1, 3, 4]);
    }

    #[test]
    fn empty_document_has_no_segments() {
        assert!(layout_parse(&doc(&[])).is_empty());
        let all_same = doc(&[(10, 10, 50, 50), (10, 10, 50, 50), (12, 12, 48, 48)]);
        let segs = layout_parse(&all_same);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].kind, SegmentKind::Paragraph);
    }

    #[test]
    fn reading_order_rejects_non_partition() {
        let d = doc(&[(0, 0, 5, 5), (10, 0, 15, 5)]);
        let seg = Segment::from_words(SegmentKind::Paragraph, vec![0], &d.words).unwrap();
        assert!(reading_order(&d, &[seg]).is_err());
    }

    #[test]
    fn quality_examples() {
        let q = order_quality(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
        assert_eq!((q.kendall_tau, q.pair_accuracy, q.exact_match), (1.0, 1.0, true));
        assert_eq!(order_quality(&[3, 2, 1, 0], &[0, 1, 2, 3]).unwrap().kendall_tau, -1.0);
        let q = order_quality(&[0, 2, 1, 3], &[0, 1, 2, 3]).unwrap();
        assert!((q.kendall_tau - (1.0 - 2.0 / 6.0)).abs() < 1e-15);
        assert!((q.pair_accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert!(!q.exact_match);
        assert!(order_quality(&[0, 1], &[0, 1, 2]).is_err());
        assert!(order_quality(&[0, 0], &[0, 1]).is_err());
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<(i32, i32, i32, i32)>> {
        proptest::collection::vec((0..800i32, 0..800i32, 0..120i32, 0..40i32), 0..40)
            .prop_map(|v| v.into_iter().map(|(x, y, w, h)| (x, y, x + w, y + h)).collect())
    }

    proptest! {
        #[test]
        fn orders_are_permutations(boxes in arb_boxes()) {
            let d = doc(&boxes);
            prop_assert!(is_permutation(&raster_scan_order(&d).permutation, d.len()));
            prop_assert!(is_permutation(&layout_order(&d).permutation, d.len()));
        }

        #[test]
        fn orders_are_translation_invariant(boxes in arb_boxes(), dx in 0..80i32, dy in 0..60i32) {
            let d = doc(&boxes);
            let moved = doc(&boxes.iter().map(|&(a, b, c, e)| (a + dx, b + dy, c + dx, e + dy)).collect::<Vec<_>>());
            prop_assert_eq!(raster_scan_order(&d), raster_scan_order(&moved));
            prop_assert_eq!(layout_order(&d), layout_order(&moved));
        }

        #[test]
        fn unsplittable_pages_read_in_raster_order(n in 1usize..12, seed in 0u64..1000) {
            // One dense paragraph: word gaps and line gaps stay under the
            // cut threshold, and a single column rules out tables.
            let mut boxes = Vec::new();
            let mut x = 100;
            let mut y = 100 + (seed % 7) as i32;
            for i in 0..n {
                if x > 300 {
                    x = 100;
                    y += 20;
                }
                let w = 30 + ((seed as usize + i * 7) % 20) as i32;
                boxes.push((x, y, x + w, y + 14));
                x += w + 6;
            }
            let d = doc(&boxes);
            prop_assert_eq!(layout_order(&d).permutation, raster_scan_order(&d).permutation);
        }
    }
}
