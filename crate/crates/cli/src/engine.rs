//! Request handling shared by the command line and the HTTP service, so
//! both produce the same bytes for the same checkpoint, request and seed.

use std::path::Path;

use layoutgen::dataset::LengthPrior;
use layoutgen::decoder::{generate_conditional, generate_unconditional, parse_group_order, DecodeConfig, DecodeTrace, Predictor};
use layoutgen::layout::{CanvasJson, CoordSpace, ElementJson, LayoutJson, LayoutSchema, PartialElement};
use layoutgen::model::{CheckpointFile, ModelConfig, ModelParams};
use layoutgen::training::TrainConfig;
use layoutgen::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Everything a checkpoint carries beside its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub schema: LayoutSchema,
    pub length_prior: LengthPrior,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub provenance: String,
}

impl ModelMetadata {
    pub fn to_value(&self) -> AppResult<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| AppError::Core(e.into()))
    }
}

/// A loaded, read-only model.
#[derive(Clone, Debug)]
pub struct ServedModel {
    pub id: String,
    pub params: ModelParams,
    pub meta: ModelMetadata,
}

impl ServedModel {
    pub fn new(id: impl Into<String>, params: ModelParams, meta: ModelMetadata) -> AppResult<Self> {
        params.check_schema(&meta.schema)?;
        Ok(ServedModel {
            id: id.into(),
            params,
            meta,
        })
    }

    /// Loads a checkpoint; the model id is the file stem.
    pub fn load(path: impl AsRef<Path>) -> AppResult<Self> {
        let path = path.as_ref();
        let ck = CheckpointFile::load(path)?;
        let meta: ModelMetadata = serde_json::from_value(ck.metadata.clone()).map_err(|e| {
            CoreError::Checkpoint(format!("{} lacks model metadata: {e}", path.display()))
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        ServedModel::new(id, ck.params, meta)
    }

    pub fn schema(&self) -> &LayoutSchema {
        &self.meta.schema
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            id: self.id.clone(),
            schema: self.meta.schema.clone(),
            model_config: self.params.config().clone(),
            train_config: self.meta.train_config.clone(),
            provenance: self.meta.provenance.clone(),
            num_parameters: self.params.num_parameters(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub schema: LayoutSchema,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub provenance: String,
    pub num_parameters: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Conditional,
    Unconditional,
}

/// An element with per-field presence; a present field is locked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialElementJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
}

impl PartialElementJson {
    fn coords(&self) -> [(&'static str, Option<f64>); 4] {
        [("x", self.x), ("y", self.y), ("w", self.w), ("h", self.h)]
    }
}

/// Optional decoder settings; absent fields keep the mode's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeOverrides {
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_order: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<Predictor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A partially specified layout as read from an input file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialLayoutJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canvas: Option<CanvasJson>,
    #[serde(default)]
    pub coords: CoordSpace,
    pub elements: Vec<PartialElementJson>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub elements: Vec<PartialElementJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canvas: Option<CanvasJson>,
    #[serde(default)]
    pub coords: CoordSpace,
    #[serde(default)]
    pub config: DecodeOverrides,
    #[serde(default)]
    pub trace: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub layout: LayoutJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<DecodeTrace>,
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> AppError {
    AppError::Core(CoreError::Validation {
        field: Some(field.into()),
        message: message.into(),
    })
}

impl GenerateRequest {
    /// Decoder settings for this request, validated against `schema`.
    pub fn decode_config(&self, schema: &LayoutSchema) -> AppResult<DecodeConfig> {
        let mut config = match self.mode {
            Mode::Conditional => DecodeConfig::default(),
            Mode::Unconditional => DecodeConfig::unconditional(),
        };
        let o = &self.config;
        if let Some(t) = o.iterations {
            config.iterations = t;
        }
        if let Some(order) = &o.group_order {
            config.group_order = parse_group_order(order).map_err(|e| invalid("config.group_order", e.to_string()))?;
        }
        if let Some(p) = o.predictor {
            config.predictor = p;
        }
        if let Some(seed) = o.seed {
            config.seed = seed;
        }
        config.trace = self.trace;
        config.validate(schema).map_err(|e| invalid("config", e.to_string()))?;
        Ok(config)
    }

    fn canvas(&self) -> AppResult<CanvasJson> {
        let c = self.canvas.unwrap_or(CanvasJson { w: 1.0, h: 1.0 });
        if !(c.w.is_finite() && c.h.is_finite() && c.w > 0.0 && c.h > 0.0) {
            return Err(invalid("canvas", "canvas dimensions must be positive and finite"));
        }
        Ok(c)
    }

    fn scale(&self, canvas: CanvasJson) -> (f64, f64) {
        match self.coords {
            CoordSpace::Normalized => (1.0, 1.0),
            CoordSpace::Absolute => (canvas.w, canvas.h),
        }
    }

    /// Converts the request elements to normalized partial elements.
    pub fn partial_elements(&self, schema: &LayoutSchema) -> AppResult<Vec<PartialElement>> {
        let (sx, sy) = self.scale(self.canvas()?);
        self.elements
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let category = match &e.category {
                    None => None,
                    Some(name) => Some(schema.category_index(name).ok_or_else(|| {
                        invalid(format!("elements[{i}].category"), format!("unknown category {name:?}"))
                    })?),
                };
                let mut out = [None; 4];
                for (slot, ((name, value), scale)) in out.iter_mut().zip(e.coords().into_iter().zip([sx, sy, sx, sy])) {
                    if let Some(v) = value {
                        let n = v / scale;
                        if !n.is_finite() || !(0.0..=1.0).contains(&n) {
                            return Err(invalid(
                                format!("elements[{i}].{name}"),
                                format!("value {v} lies outside the canvas"),
                            ));
                        }
                        *slot = Some(n);
                    }
                }
                let [x, y, w, h] = out;
                Ok(PartialElement { category, x, y, w, h })
            })
            .collect()
    }
}

/// Decodes one request against `model`.
pub fn generate(model: &ServedModel, request: &GenerateRequest) -> AppResult<GenerateResponse> {
    let schema = model.schema();
    match (request.mode, request.elements.is_empty()) {
        (Mode::Conditional, true) => return Err(invalid("elements", "conditional generation needs at least one element")),
        (Mode::Unconditional, false) => return Err(invalid("elements", "unconditional generation takes no elements")),
        _ => {}
    }
    let canvas = request.canvas()?;
    let (sx, sy) = request.scale(canvas);
    let config = request.decode_config(schema)?;
    let generated = match request.mode {
        Mode::Conditional => generate_conditional(&model.params, &request.partial_elements(schema)?, schema, &config)?,
        Mode::Unconditional => generate_unconditional(&model.params, &model.meta.length_prior, schema, &config)?,
    };

    let mut elements: Vec<ElementJson> = generated
        .layout
        .elements
        .iter()
        .map(|e| ElementJson {
            category: schema.categories()[e.category].clone(),
            x: e.x * sx,
            y: e.y * sy,
            w: e.w * sx,
            h: e.h * sy,
        })
        .collect();
    // Locked values are echoed exactly as sent, not re-derived from the
    // normalized form.
    for (out, given) in elements.iter_mut().zip(&request.elements) {
        if let Some(c) = &given.category {
            out.category.clone_from(c);
        }
        for (slot, v) in [(&mut out.x, given.x), (&mut out.y, given.y), (&mut out.w, given.w), (&mut out.h, given.h)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
    }
    Ok(GenerateResponse {
        layout: LayoutJson {
            canvas,
            elements,
            coords: request.coords,
        },
        trace: request.trace.then_some(generated.trace),
    })
}

/// Canonical serialization of a generated layout.
pub fn layout_to_string(layout: &LayoutJson) -> AppResult<String> {
    serde_json::to_string_pretty(layout).map_err(|e| AppError::Core(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use layoutgen::dataset::{estimate_length_prior, generate_synthetic, SyntheticStyle};
    use layoutgen::model::init_params;

    fn model() -> ServedModel {
        let corpus = generate_synthetic(60, 1, &SyntheticStyle::default()).unwrap();
        let mut mc = ModelConfig::desk(&corpus.schema);
        mc.embed_dim = 16;
        mc.ffn_dim = 16;
        let meta = ModelMetadata {
            schema: corpus.schema.clone(),
            length_prior: estimate_length_prior(&corpus).unwrap(),
            train_config: None,
            provenance: corpus.provenance.clone(),
        };
        ServedModel::new("tiny", init_params(&mc, 3).unwrap(), meta).unwrap()
    }

    fn element(cat: &str, w: f64, h: f64) -> PartialElementJson {
        PartialElementJson {
            category: Some(cat.into()),
            w: Some(w),
            h: Some(h),
            ..Default::default()
        }
    }

    #[test]
    fn locked_fields_are_echoed() {
        let m = model();
        let req = GenerateRequest {
            elements: vec![element("text", 0.3, 0.1), element("image", 0.51, 0.2)],
            ..Default::default()
        };
        let out = generate(&m, &req).unwrap();
        assert_eq!(out.layout.elements.len(), 2);
        assert_eq!(out.layout.elements[0].category, "text");
        assert_eq!(out.layout.elements[1].w, 0.51);
        assert!(out.trace.is_none());
    }

    #[test]
    fn absolute_coordinates_round_trip_the_locks() {
        let m = model();
        let req = GenerateRequest {
            canvas: Some(CanvasJson { w: 360.0, h: 640.0 }),
            coords: CoordSpace::Absolute,
            elements: vec![PartialElementJson {
                x: Some(17.0),
                h: Some(333.3),
                ..Default::default()
            }],
            ..Default::default()
        };
        let out = generate(&m, &req).unwrap();
        let e = &out.layout.elements[0];
        assert_eq!((e.x, e.h), (17.0, 333.3));
        assert!(e.y <= 640.0 && e.w <= 360.0);
        assert_eq!(out.layout.coords, CoordSpace::Absolute);
    }

    #[test]
    fn malformed_requests_name_the_field() {
        let m = model();
        let mut req = GenerateRequest {
            elements: vec![element("text", -0.2, 0.1)],
            ..Default::default()
        };
        assert_eq!(generate(&m, &req).unwrap_err().field(), Some("elements[0].w"));
        req.elements = vec![element("nope", 0.2, 0.1)];
        assert_eq!(generate(&m, &req).unwrap_err().field(), Some("elements[0].category"));
        req.elements.clear();
        assert_eq!(generate(&m, &req).unwrap_err().field(), Some("elements"));
        req.mode = Mode::Unconditional;
        req.config.group_order = Some("CSX".into());
        assert_eq!(generate(&m, &req).unwrap_err().field(), Some("config.group_order"));
        req.config.group_order = Some("CS".into());
        assert_eq!(generate(&m, &req).unwrap_err().field(), Some("config"));
    }

    #[test]
    fn unconditional_is_seed_deterministic() {
        let m = model();
        let mut req = GenerateRequest {
            mode: Mode::Unconditional,
            trace: true,
            ..Default::default()
        };
        req.config.seed = Some(9);
        let a = generate(&m, &req).unwrap();
        let b = generate(&m, &req).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(!a.trace.unwrap().is_empty());
    }

    #[test]
    fn request_json_shape() {
        let text = r#"{"mode":"conditional","elements":[{"category":"text","w":0.5}],
            "config":{"T":6,"group_order":"SPC","predictor":"topk:3","seed":4},"trace":true}"#;
        let req: GenerateRequest = serde_json::from_str(text).unwrap();
        let schema = model().meta.schema;
        let c = req.decode_config(&schema).unwrap();
        assert_eq!(c.iterations, 6);
        assert_eq!(c.predictor, Predictor::TopK(3));
        assert_eq!(layoutgen::decoder::format_group_order(&c.group_order), "SPC");
        assert!(serde_json::from_str::<GenerateRequest>(r#"{"elements":[{"z":1}]}"#).is_err());
    }
}
