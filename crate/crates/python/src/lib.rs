//! Python bindings: geometry helpers, dataset generation, evaluation and a
//! trainable single-precision network.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use zipnet::config::RunConfig;
use zipnet::data::{gen_shapeworld, to_tensor, write_dataset, AnnotatedImage, Dataset, RgbImage};
use zipnet::eval::{build_report, iou_grid, EvalImage};
use zipnet::geometry::{self, BBox, Offset};
use zipnet::inference::propose;
use zipnet::zipnet::{Trainer, ZipNet};
use zipnet::ZipError;

fn err(e: ZipError) -> PyErr {
    match e {
        ZipError::Config { .. } | ZipError::Shape { .. } | ZipError::InvalidArgument { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3])
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    geometry::iou(&bbox(a), &bbox(b))
}

/// Greedy NMS; returns kept indices in descending score order.
#[pyfunction]
fn nms(boxes: Vec<[f64; 4]>, scores: Vec<f64>, threshold: f64) -> PyResult<Vec<usize>> {
    let boxes: Vec<BBox> = boxes.into_iter().map(bbox).collect();
    geometry::nms(&boxes, &scores, threshold).map_err(err)
}

#[pyfunction]
fn encode_offset(anchor: [f64; 4], gt: [f64; 4]) -> [f64; 4] {
    geometry::encode_offset(&bbox(anchor), &bbox(gt)).as_array()
}

#[pyfunction]
fn decode_offset(offset: [f64; 4], anchor: [f64; 4]) -> PyResult<[f64; 4]> {
    let o = Offset::new(offset[0], offset[1], offset[2], offset[3]);
    Ok(geometry::decode_offset(&o, &bbox(anchor)).map_err(err)?.as_array())
}

/// Writes a synthetic shape dataset to `out_dir`; returns the image count.
#[pyfunction]
#[pyo3(signature = (out_dir, count, side=192, seed=0))]
fn gen_data(out_dir: &str, count: usize, side: usize, seed: u64) -> PyResult<usize> {
    let mix = zipnet::data::DEFAULT_MIX;
    let images = gen_shapeworld(count, side, seed, mix).map_err(err)?;
    write_dataset(out_dir, &images, seed, Some(mix)).map_err(err)?;
    Ok(images.len())
}

/// Dataset-level metrics. `gts[i]` holds image i's boxes and `proposals[i]`
/// its `[x1, y1, x2, y2, score]` rows. Returns the report as JSON text.
#[pyfunction]
#[pyo3(signature = (gts, proposals, budgets=None))]
fn evaluate(gts: Vec<Vec<[f64; 4]>>, proposals: Vec<Vec<[f64; 5]>>, budgets: Option<Vec<usize>>) -> PyResult<String> {
    if gts.len() != proposals.len() {
        return Err(PyValueError::new_err("gts and proposals must have one entry per image"));
    }
    let images: Vec<EvalImage> = gts
        .into_iter()
        .zip(proposals)
        .enumerate()
        .map(|(i, (g, p))| EvalImage {
            image_id: i.to_string(),
            gts: g.into_iter().map(bbox).collect(),
            proposals: p.into_iter().map(|r| (BBox::new(r[0], r[1], r[2], r[3]), r[4])).collect(),
        })
        .collect();
    let budgets = budgets.unwrap_or_else(|| zipnet::eval::DEFAULT_BUDGETS.to_vec());
    let report = build_report(&images, &budgets, &iou_grid()).map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// A float32 network with its trainer state.
#[pyclass(unsendable)]
struct Network {
    config: RunConfig,
    trainer: Trainer<f32>,
    data: Vec<AnnotatedImage>,
}

#[pymethods]
impl Network {
    /// `config` is a JSON document (defaults when omitted); `overrides` are
    /// `key=value` strings as accepted by the command line.
    #[new]
    #[pyo3(signature = (config=None, overrides=Vec::new()))]
    fn new(config: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let config = RunConfig::from_json_with_overrides(config.unwrap_or(""), &overrides).map_err(err)?;
        let net = ZipNet::new(config.model.clone(), config.seed).map_err(err)?;
        let trainer = Trainer::new(net, config.train.clone(), config.nms, config.seed);
        Ok(Network {
            config,
            trainer,
            data: Vec::new(),
        })
    }

    fn parameter_count(&mut self) -> usize {
        self.trainer.net.parameter_count()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.trainer.iteration
    }

    /// Loads a dataset directory (or manifest path) for `train`.
    fn load_data(&mut self, path: &str) -> PyResult<usize> {
        let p = std::path::Path::new(path);
        let manifest = if p.is_dir() { p.join("manifest.json") } else { p.to_path_buf() };
        self.data = Dataset::open(manifest).and_then(|d| d.load_all()).map_err(err)?;
        Ok(self.data.len())
    }

    /// Runs `steps` training iterations; returns the total loss of each.
    fn train(&mut self, steps: usize) -> PyResult<Vec<f64>> {
        (0..steps)
            .map(|_| self.trainer.step(&self.data).map(|r| r.total).map_err(err))
            .collect()
    }

    /// Proposals for an RGB image given as row-major interleaved bytes.
    fn propose(&mut self, width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Vec<[f64; 5]>> {
        let img = RgbImage::new(width, height, pixels).map_err(err)?;
        let x = to_tensor(&img);
        let props = propose(&mut self.trainer.net, &x, &self.config.test, &self.config.nms).map_err(err)?;
        Ok(props
            .iter()
            .map(|p| [p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2, p.score])
            .collect())
    }

    fn save(&mut self, path: &str) -> PyResult<()> {
        self.trainer.net.save(path).map_err(err)
    }

    fn load(&mut self, path: &str) -> PyResult<()> {
        self.trainer.net.load(path).map_err(err)
    }

    fn config_json(&self) -> String {
        self.config.to_json()
    }
}

#[pymodule]
fn zipnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(encode_offset, m)?)?;
    m.add_function(wrap_pyfunction!(decode_offset, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Network>()?;
    Ok(())
}
