//! Layout data model, uniform quantization and the shared-vocabulary token
//! representation.
//!
//! A layout with `K` elements flattens to
//! `[bos, c1, x1, y1, w1, h1, c2, ..., hK, eos]` followed by padding up to
//! the schema's fixed maximum length. All coordinate attributes share one
//! range of bin ids; the slot position decides which attribute a token fills.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
const NUM_SPECIAL: u32 = 4;

/// Number of attributes describing one element.
pub const ATTRS_PER_ELEMENT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    C,
    S,
    P,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::C, Group::S, Group::P];

    pub fn as_char(self) -> char {
        match self {
            Group::C => 'C',
            Group::S => 'S',
            Group::P => 'P',
        }
    }

    pub fn from_char(c: char) -> Option<Group> {
        match c.to_ascii_uppercase() {
            'C' => Some(Group::C),
            'S' => Some(Group::S),
            'P' => Some(Group::P),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Category,
    X,
    Y,
    W,
    H,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Category,
        Attribute::X,
        Attribute::Y,
        Attribute::W,
        Attribute::H,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Category => "category",
            Attribute::X => "x",
            Attribute::Y => "y",
            Attribute::W => "w",
            Attribute::H => "h",
        }
    }

    pub fn is_category(self) -> bool {
        self == Attribute::Category
    }

    /// Index into an `[x, y, w, h]` array; `None` for the category.
    pub fn coord_index(self) -> Option<usize> {
        match self {
            Attribute::Category => None,
            Attribute::X => Some(0),
            Attribute::Y => Some(1),
            Attribute::W => Some(2),
            Attribute::H => Some(3),
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-element attribute layout shared by every layout of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct LayoutSchema {
    attributes: Vec<Attribute>,
    groups: BTreeMap<Attribute, Group>,
    num_bins: u32,
    categories: Vec<String>,
    max_elements: usize,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    #[serde(default = "default_attributes")]
    attribute_names: Vec<Attribute>,
    #[serde(default = "default_groups")]
    groups: BTreeMap<Attribute, Group>,
    #[serde(default = "default_bins")]
    num_bins: u32,
    categories: Vec<String>,
    max_elements: usize,
}

fn default_attributes() -> Vec<Attribute> {
    Attribute::ALL.to_vec()
}

fn default_groups() -> BTreeMap<Attribute, Group> {
    BTreeMap::from([
        (Attribute::Category, Group::C),
        (Attribute::X, Group::P),
        (Attribute::Y, Group::P),
        (Attribute::W, Group::S),
        (Attribute::H, Group::S),
    ])
}

fn default_bins() -> u32 {
    32
}

impl TryFrom<SchemaRepr> for LayoutSchema {
    type Error = Error;

    fn try_from(r: SchemaRepr) -> Result<Self> {
        LayoutSchema::with_layout(r.attribute_names, r.groups, r.num_bins, r.categories, r.max_elements)
    }
}

impl From<LayoutSchema> for SchemaRepr {
    fn from(s: LayoutSchema) -> Self {
        SchemaRepr {
            attribute_names: s.attributes,
            groups: s.groups,
            num_bins: s.num_bins,
            categories: s.categories,
            max_elements: s.max_elements,
        }
    }
}

impl LayoutSchema {
    /// Default attribute order `[category, x, y, w, h]` with groups
    /// category→C, w/h→S, x/y→P.
    pub fn new(categories: Vec<String>, num_bins: u32, max_elements: usize) -> Result<Self> {
        Self::with_layout(default_attributes(), default_groups(), num_bins, categories, max_elements)
    }

    pub fn with_layout(
        attributes: Vec<Attribute>,
        groups: BTreeMap<Attribute, Group>,
        num_bins: u32,
        categories: Vec<String>,
        max_elements: usize,
    ) -> Result<Self> {
        if attributes.len() != ATTRS_PER_ELEMENT
            || Attribute::ALL.iter().any(|a| !attributes.contains(a))
        {
            return Err(Error::validation(
                "attribute_names",
                "must list each of category, x, y, w, h exactly once",
            ));
        }
        if groups.len() != ATTRS_PER_ELEMENT || attributes.iter().any(|a| !groups.contains_key(a)) {
            return Err(Error::validation(
                "groups",
                "every attribute must belong to exactly one group",
            ));
        }
        if num_bins < 2 {
            return Err(Error::validation("num_bins", "must be at least 2"));
        }
        if categories.is_empty() {
            return Err(Error::validation("categories", "must not be empty"));
        }
        if max_elements == 0 {
            return Err(Error::validation("max_elements", "must be at least 1"));
        }
        Ok(LayoutSchema {
            attributes,
            groups,
            num_bins,
            categories,
            max_elements,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn group_of(&self, attr: Attribute) -> Group {
        self.groups[&attr]
    }

    /// Groups that own at least one attribute, in C, S, P order.
    pub fn groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.groups.values().any(|x| x == g))
            .collect()
    }

    pub fn num_bins(&self) -> u32 {
        self.num_bins
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn max_elements(&self) -> usize {
        self.max_elements
    }

    /// Fixed padded length `2 + 5 * max_elements`.
    pub fn max_seq_len(&self) -> usize {
        2 + ATTRS_PER_ELEMENT * self.max_elements
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            num_categories: self.categories.len() as u32,
            num_bins: self.num_bins,
        }
    }
}

/// Token-id layout: specials, then categories, then coordinate bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub num_categories: u32,
    pub num_bins: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Pad,
    Bos,
    Eos,
    Mask,
    Category(u32),
    Bin(u32),
}

impl Vocab {
    pub fn category_base(&self) -> u32 {
        NUM_SPECIAL
    }

    pub fn coord_base(&self) -> u32 {
        NUM_SPECIAL + self.num_categories
    }

    pub fn size(&self) -> usize {
        (NUM_SPECIAL + self.num_categories + self.num_bins) as usize
    }

    pub fn category_id(&self, category: u32) -> u32 {
        self.category_base() + category
    }

    pub fn bin_id(&self, bin: u32) -> u32 {
        self.coord_base() + bin
    }

    pub fn classify(&self, id: u32) -> Option<TokenClass> {
        Some(match id {
            PAD_ID => TokenClass::Pad,
            BOS_ID => TokenClass::Bos,
            EOS_ID => TokenClass::Eos,
            MASK_ID => TokenClass::Mask,
            id if id < self.coord_base() => TokenClass::Category(id - self.category_base()),
            id if (id as usize) < self.size() => TokenClass::Bin(id - self.coord_base()),
            _ => return None,
        })
    }

    /// Token ids an attribute slot may legally hold.
    pub fn legal_range(&self, attr: Attribute) -> Range<u32> {
        if attr.is_category() {
            self.category_base()..self.coord_base()
        } else {
            self.coord_base()..self.size() as u32
        }
    }
}

/// Uniform quantizer: `clamp(floor(v * num_bins), 0, num_bins - 1)`.
pub fn quantize(v: f64, num_bins: u32) -> Result<u32> {
    if num_bins < 2 {
        return Err(Error::InvalidInput(format!("num_bins must be >= 2, got {num_bins}")));
    }
    if !v.is_finite() {
        return Err(Error::InvalidInput(format!("cannot quantize non-finite value {v}")));
    }
    let bin = (v * num_bins as f64).floor();
    Ok(bin.clamp(0.0, (num_bins - 1) as f64) as u32)
}

/// Bin center `(bin + 0.5) / num_bins`.
pub fn dequantize(bin: u32, num_bins: u32) -> Result<f64> {
    if bin >= num_bins {
        return Err(Error::InvalidInput(format!("bin {bin} out of range for {num_bins} bins")));
    }
    Ok((bin as f64 + 0.5) / num_bins as f64)
}

/// One layout element. `x`, `y` are the box center; all values normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub category: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// Quantized `[x, y, w, h]`.
    pub bins: Option<[u32; 4]>,
}

impl Element {
    pub fn new(category: usize, x: f64, y: f64, w: f64, h: f64) -> Self {
        Element {
            category,
            x,
            y,
            w,
            h,
            bins: None,
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_bins(category: usize, bins: [u32; 4], num_bins: u32) -> Result<Self> {
        let mut c = [0.0; 4];
        for (v, &b) in c.iter_mut().zip(&bins) {
            *v = dequantize(b, num_bins)?;
        }
        Ok(Element {
            category,
            x: c[0],
            y: c[1],
            w: c[2],
            h: c[3],
            bins: Some(bins),
        })
    }

    /// Stored bins, or the quantized coordinates when none are stored.
    pub fn quantized(&self, num_bins: u32) -> Result<[u32; 4]> {
        if let Some(b) = self.bins {
            return Ok(b);
        }
        let c = self.coords();
        Ok([
            quantize(c[0], num_bins)?,
            quantize(c[1], num_bins)?,
            quantize(c[2], num_bins)?,
            quantize(c[3], num_bins)?,
        ])
    }

    /// Fills `bins` from the real-valued coordinates (clamped to [0, 1]).
    pub fn quantize_in_place(&mut self, num_bins: u32) -> Result<()> {
        for v in [&mut self.x, &mut self.y, &mut self.w, &mut self.h] {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite coordinate {v}")));
            }
            *v = v.clamp(0.0, 1.0);
        }
        self.bins = None;
        self.bins = Some(self.quantized(num_bins)?);
        Ok(())
    }

    /// Edges `(left, top, right, bottom)` in normalized units.
    pub fn ltrb(&self) -> [f64; 4] {
        [
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub canvas_w: f64,
    pub canvas_h: f64,
    pub elements: Vec<Element>,
}

impl Layout {
    pub fn new(elements: Vec<Element>) -> Self {
        Layout {
            canvas_w: 1.0,
            canvas_h: 1.0,
            elements,
        }
    }

    pub fn validate(&self, schema: &LayoutSchema) -> Result<()> {
        if !(self.canvas_w > 0.0 && self.canvas_h > 0.0) {
            return Err(Error::validation("canvas", "canvas dimensions must be positive"));
        }
        if self.elements.is_empty() {
            return Err(Error::Capacity("layout has no elements".into()));
        }
        if self.elements.len() > schema.max_elements() {
            return Err(Error::Capacity(format!(
                "{} elements exceed the schema maximum of {}",
                self.elements.len(),
                schema.max_elements()
            )));
        }
        for (i, e) in self.elements.iter().enumerate() {
            if e.category >= schema.categories().len() {
                return Err(Error::Vocabulary(format!(
                    "element {i} has category index {} outside {} categories",
                    e.category,
                    schema.categories().len()
                )));
            }
            if let Some(bins) = e.bins {
                if bins.iter().any(|&b| b >= schema.num_bins()) {
                    return Err(Error::validation(
                        format!("elements[{i}].bins"),
                        format!("bins {bins:?} outside [0, {})", schema.num_bins()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Quantized view: every element carries bins and sits at bin centers.
    pub fn quantized(&self, schema: &LayoutSchema) -> Result<Layout> {
        let elements = self
            .elements
            .iter()
            .map(|e| Element::from_bins(e.category, e.quantized(schema.num_bins())?, schema.num_bins()))
            .collect::<Result<_>>()?;
        Ok(Layout {
            canvas_w: self.canvas_w,
            canvas_h: self.canvas_h,
            elements,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotStatus {
    Locked,
    Unknown,
    Committed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Bos,
    Eos,
    Pad,
    Attr {
        element: usize,
        attribute: Attribute,
        group: Group,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub kind: SlotKind,
    pub status: SlotStatus,
}

impl Slot {
    pub fn attr(&self) -> Option<(usize, Attribute, Group)> {
        match self.kind {
            SlotKind::Attr {
                element,
                attribute,
                group,
            } => Some((element, attribute, group)),
            _ => None,
        }
    }

    pub fn is_attr(&self) -> bool {
        matches!(self.kind, SlotKind::Attr { .. })
    }
}

/// Flattened token ids with per-position slot metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub slots: Vec<Slot>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length up to and including EOS.
    pub fn unpadded_len(&self) -> usize {
        self.slots
            .iter()
            .position(|s| s.kind == SlotKind::Eos)
            .map(|p| p + 1)
            .unwrap_or(self.ids.len())
    }

    pub fn num_elements(&self) -> usize {
        self.slots.iter().filter(|s| s.is_attr()).count() / ATTRS_PER_ELEMENT
    }

    pub fn attr_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().enumerate().filter(|(_, s)| s.is_attr()).map(|(i, _)| i)
    }

    pub fn unknown_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.status == SlotStatus::Unknown)
            .map(|(i, _)| i)
    }

    /// Positions of the 5-token block belonging to `element`.
    pub fn element_block(&self, element: usize) -> Range<usize> {
        let start = 1 + element * ATTRS_PER_ELEMENT;
        start..start + ATTRS_PER_ELEMENT
    }
}

fn build_slots(num_elements: usize, schema: &LayoutSchema) -> Vec<Slot> {
    let locked = |kind| Slot {
        kind,
        status: SlotStatus::Locked,
    };
    let mut slots = Vec::with_capacity(schema.max_seq_len());
    slots.push(locked(SlotKind::Bos));
    for element in 0..num_elements {
        for &attribute in schema.attributes() {
            slots.push(locked(SlotKind::Attr {
                element,
                attribute,
                group: schema.group_of(attribute),
            }));
        }
    }
    slots.push(locked(SlotKind::Eos));
    while slots.len() < schema.max_seq_len() {
        slots.push(locked(SlotKind::Pad));
    }
    slots
}

fn attr_token(e_cat: usize, bins: &[u32; 4], attr: Attribute, vocab: &Vocab) -> u32 {
    match attr.coord_index() {
        None => vocab.category_id(e_cat as u32),
        Some(i) => vocab.bin_id(bins[i]),
    }
}

/// Flattens a layout into the fixed-length token sequence. All slots are locked.
pub fn tokenize(layout: &Layout, schema: &LayoutSchema) -> Result<TokenSequence> {
    layout.validate(schema)?;
    let vocab = schema.vocab();
    let slots = build_slots(layout.elements.len(), schema);
    let mut ids = Vec::with_capacity(slots.len());
    for slot in &slots {
        ids.push(match slot.kind {
            SlotKind::Bos => BOS_ID,
            SlotKind::Eos => EOS_ID,
            SlotKind::Pad => PAD_ID,
            SlotKind::Attr {
                element, attribute, ..
            } => {
                let e = &layout.elements[element];
                attr_token(e.category, &e.quantized(schema.num_bins())?, attribute, &vocab)
            }
        });
    }
    Ok(TokenSequence { ids, slots })
}

/// Rebuilds a layout on a unit canvas from a fully specified sequence.
pub fn detokenize(seq: &TokenSequence, schema: &LayoutSchema) -> Result<Layout> {
    let vocab = schema.vocab();
    let k = seq.num_elements();
    let mut cats = vec![None; k];
    let mut bins = vec![[None::<u32>; 4]; k];
    for (pos, (&id, slot)) in seq.ids.iter().zip(&seq.slots).enumerate() {
        let Some((element, attribute, _)) = slot.attr() else {
            continue;
        };
        if id == MASK_ID || slot.status == SlotStatus::Unknown {
            return Err(Error::IncompleteSequence(format!(
                "position {pos} ({attribute} of element {element}) is still masked"
            )));
        }
        match (vocab.classify(id), attribute.coord_index()) {
            (Some(TokenClass::Category(c)), None) => cats[element] = Some(c as usize),
            (Some(TokenClass::Bin(b)), Some(i)) => bins[element][i] = Some(b),
            _ => {
                return Err(Error::Decode(format!(
                    "token {id} at position {pos} is not legal for attribute {attribute}"
                )))
            }
        }
    }
    let elements = (0..k)
        .map(|i| {
            let cat = cats[i].ok_or_else(|| Error::Decode(format!("element {i} lacks a category")))?;
            let mut b = [0u32; 4];
            for (dst, src) in b.iter_mut().zip(&bins[i]) {
                *dst = src.ok_or_else(|| Error::Decode(format!("element {i} lacks a coordinate")))?;
            }
            Element::from_bins(cat, b, schema.num_bins())
        })
        .collect::<Result<Vec<_>>>()?;
    if elements.is_empty() {
        return Err(Error::Decode("sequence holds no elements".into()));
    }
    Ok(Layout::new(elements))
}

/// An element whose attributes may individually be unknown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialElement {
    pub category: Option<usize>,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub w: Option<f64>,
    pub h: Option<f64>,
}

impl PartialElement {
    pub fn get(&self, attr: Attribute) -> Option<f64> {
        match attr {
            Attribute::Category => self.category.map(|c| c as f64),
            Attribute::X => self.x,
            Attribute::Y => self.y,
            Attribute::W => self.w,
            Attribute::H => self.h,
        }
    }

    /// Keeps only the attributes of the listed groups.
    pub fn from_element(e: &Element, known: &[Group], schema: &LayoutSchema) -> Self {
        let keep = |a: Attribute| known.contains(&schema.group_of(a));
        PartialElement {
            category: keep(Attribute::Category).then_some(e.category),
            x: keep(Attribute::X).then_some(e.x),
            y: keep(Attribute::Y).then_some(e.y),
            w: keep(Attribute::W).then_some(e.w),
            h: keep(Attribute::H).then_some(e.h),
        }
    }

    pub fn unknown(&self) -> bool {
        Attribute::ALL.iter().all(|&a| self.get(a).is_none())
    }
}

/// Builds a decoder input: known attributes locked, unknown ones masked.
pub fn make_conditional_input(elements: &[PartialElement], schema: &LayoutSchema) -> Result<TokenSequence> {
    if elements.is_empty() {
        return Err(Error::Capacity("conditional input has no elements".into()));
    }
    if elements.len() > schema.max_elements() {
        return Err(Error::Capacity(format!(
            "{} elements exceed the schema maximum of {}",
            elements.len(),
            schema.max_elements()
        )));
    }
    let vocab = schema.vocab();
    let mut slots = build_slots(elements.len(), schema);
    let mut ids = Vec::with_capacity(slots.len());
    for slot in slots.iter_mut() {
        let id = match slot.kind {
            SlotKind::Bos => BOS_ID,
            SlotKind::Eos => EOS_ID,
            SlotKind::Pad => PAD_ID,
            SlotKind::Attr {
                element, attribute, ..
            } => {
                let field = format!("elements[{element}].{attribute}");
                match elements[element].get(attribute) {
                    None => {
                        slot.status = SlotStatus::Unknown;
                        MASK_ID
                    }
                    Some(v) if attribute.is_category() => {
                        let c = v as usize;
                        if c >= schema.categories().len() {
                            return Err(Error::validation(field, format!("category index {c} is not in the schema")));
                        }
                        vocab.category_id(c as u32)
                    }
                    Some(v) => {
                        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                            return Err(Error::validation(field, format!("value {v} is outside [0, 1]")));
                        }
                        vocab.bin_id(quantize(v, schema.num_bins())?)
                    }
                }
            }
        };
        ids.push(id);
    }
    Ok(TokenSequence { ids, slots })
}

/// Canvas size as carried by the JSON layout shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanvasJson {
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordSpace {
    #[default]
    Normalized,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementJson {
    pub category: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// The interchange shape shared by corpora, the service and the UI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutJson {
    pub canvas: CanvasJson,
    pub elements: Vec<ElementJson>,
    #[serde(default)]
    pub coords: CoordSpace,
}

impl LayoutJson {
    /// Normalizes, clamps to [0, 1], quantizes and validates.
    pub fn to_layout(&self, schema: &LayoutSchema) -> Result<Layout> {
        let (cw, ch) = (self.canvas.w, self.canvas.h);
        if !(cw > 0.0 && ch > 0.0 && cw.is_finite() && ch.is_finite()) {
            return Err(Error::validation("canvas", "canvas dimensions must be positive"));
        }
        let (sx, sy) = match self.coords {
            CoordSpace::Normalized => (1.0, 1.0),
            CoordSpace::Absolute => (cw, ch),
        };
        let mut elements = Vec::with_capacity(self.elements.len());
        for (i, e) in self.elements.iter().enumerate() {
            let category = schema.category_index(&e.category).ok_or_else(|| {
                Error::Vocabulary(format!("element {i}: unknown category {:?}", e.category))
            })?;
            let mut el = Element::new(category, e.x / sx, e.y / sy, e.w / sx, e.h / sy);
            el.quantize_in_place(schema.num_bins())
                .map_err(|err| Error::validation(format!("elements[{i}]"), err.to_string()))?;
            elements.push(el);
        }
        let layout = Layout {
            canvas_w: cw,
            canvas_h: ch,
            elements,
        };
        layout.validate(schema)?;
        Ok(layout)
    }

    pub fn from_layout(layout: &Layout, schema: &LayoutSchema) -> Self {
        LayoutJson {
            canvas: CanvasJson {
                w: layout.canvas_w,
                h: layout.canvas_h,
            },
            elements: layout
                .elements
                .iter()
                .map(|e| ElementJson {
                    category: schema
                        .categories()
                        .get(e.category)
                        .cloned()
                        .unwrap_or_else(|| format!("#{}", e.category)),
                    x: e.x,
                    y: e.y,
                    w: e.w,
                    h: e.h,
                })
                .collect(),
            coords: CoordSpace::Normalized,
        }
    }
}
