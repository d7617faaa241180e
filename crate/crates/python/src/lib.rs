//! Python bindings: models, adapters, quantization, data preparation,
//! training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use moetune::data::{self as mdata, CleanRules, Source};
use moetune::eval::{self as meval, BenchmarkName, BenchmarkSpec, NextTokenModel, StubModel};
use moetune::lora::LoraConfig;
use moetune::quant::{quantize_4bit, DEFAULT_BLOCK_SIZE};
use moetune::train::{self as mtrain, Checkpoint, Decode, TrainConfig, Trainer};
use moetune::{tokenizer, ModelConfig, MoeTransformer, Tensor};

fn py_err(e: moetune::Error) -> PyErr {
    match e {
        moetune::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes through JSON into plain Python dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(json_err),
        None => Ok(T::default()),
    }
}

/// A mixture-of-experts decoder, optionally carrying LoRA adapters and
/// 4-bit projection weights.
#[pyclass(name = "Model", module = "moetune")]
struct PyModel {
    inner: MoeTransformer,
}

#[pymethods]
impl PyModel {
    /// `config` is a JSON object of model settings; omitted fields take defaults.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = from_json(config)?;
        Ok(PyModel {
            inner: MoeTransformer::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: mtrain::load_checkpoint(&path).map_err(py_err)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        mtrain::save_checkpoint(&Checkpoint::from_model(self.inner.clone()), &path).map_err(py_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Logits for every position, one row per input token.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        let t = self.inner.logits(&tokens).map_err(py_err)?;
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }

    /// Mean next-token loss over the assistant tokens of `(user, assistant)` pairs.
    fn loss(&self, pairs: Vec<(String, String)>) -> PyResult<f32> {
        let samples: Vec<_> = pairs
            .into_iter()
            .map(|(u, a)| mdata::render_tokens(&mdata::ChatSample::single(Source::AlpacaZh, u, a)))
            .collect();
        mtrain::corpus_loss(&self.inner, &samples, 8).map_err(py_err)
    }

    /// Replies to `message`. Greedy unless `temperature` is given.
    #[pyo3(signature = (message, max_new=64, system=None, temperature=None, top_p=None, seed=0))]
    fn chat(
        &self,
        message: &str,
        max_new: usize,
        system: Option<&str>,
        temperature: Option<f32>,
        top_p: Option<f32>,
        seed: u64,
    ) -> PyResult<String> {
        let decode = match (temperature, top_p) {
            (None, None) => Decode::Greedy,
            (t, Some(p)) => Decode::TopP {
                p,
                tau: t.unwrap_or(1.0),
                seed,
            },
            (Some(tau), None) => Decode::Temperature { tau, seed },
        };
        let prompt = mdata::render_prompt(system, &[], message);
        let out = mtrain::generate(&self.inner, &prompt, max_new, &decode).map_err(py_err)?;
        Ok(tokenizer::decode(&out))
    }

    /// Freezes the base and attaches fresh adapters. `config` is a JSON
    /// object of adapter settings.
    #[pyo3(signature = (config=None, seed=0))]
    fn attach_lora(&mut self, config: Option<&str>, seed: u64) -> PyResult<()> {
        let cfg: LoraConfig = from_json(config)?;
        self.inner.attach_lora(cfg, seed).map_err(py_err)
    }

    fn merge_lora(&mut self) -> PyResult<()> {
        self.inner.merge_adapters().map_err(py_err)
    }

    #[pyo3(signature = (block_size=DEFAULT_BLOCK_SIZE))]
    fn quantize(&mut self, block_size: usize) -> PyResult<()> {
        self.inner.quantize_base(block_size).map_err(py_err)
    }

    fn projection_bytes(&self) -> usize {
        self.inner.projection_bytes()
    }

    fn parameter_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.parameter_report())
    }

    /// Total and per-token active parameter counts.
    fn count_params(&self) -> (usize, usize) {
        self.inner.count_active_params()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(n_layers={}, d_model={}, n_experts={}, top_k={}, lora={})",
            c.n_layers,
            c.d_model,
            c.n_experts,
            c.top_k,
            self.inner.lora.is_some()
        )
    }
}

#[pyfunction]
fn encode(text: &str) -> Vec<u32> {
    tokenizer::encode_bytes(text).collect()
}

#[pyfunction]
fn decode(ids: Vec<u32>) -> String {
    tokenizer::decode(&ids)
}

/// Quantizes a matrix to 4-bit blocks and returns the reconstruction and its
/// storage size in bytes.
#[pyfunction]
#[pyo3(signature = (rows, block_size=DEFAULT_BLOCK_SIZE))]
fn quantize_roundtrip(rows: Vec<Vec<f32>>, block_size: usize) -> PyResult<(Vec<Vec<f32>>, usize)> {
    let t = Tensor::from_rows(&rows).map_err(py_err)?;
    let q = quantize_4bit(&t, block_size).map_err(py_err)?;
    let d = q.dequantize().map_err(py_err)?;
    Ok(((0..d.rows()).map(|i| d.row(i).to_vec()).collect(), q.storage_bytes()))
}

/// Ingests, cleans and writes a JSONL corpus. Returns the corpus statistics.
#[pyfunction]
#[pyo3(signature = (out, alpaca=None, alpaca_gpt4=None, sharegpt=None, lenient=false, max_seq_len=Some(512)))]
fn prepare_data<'py>(
    py: Python<'py>,
    out: PathBuf,
    alpaca: Option<PathBuf>,
    alpaca_gpt4: Option<PathBuf>,
    sharegpt: Option<PathBuf>,
    lenient: bool,
    max_seq_len: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut all = Vec::new();
    if let Some(p) = alpaca {
        all.extend(mdata::ingest_alpaca(&p, Source::AlpacaZh, lenient).map_err(py_err)?.samples);
    }
    if let Some(p) = alpaca_gpt4 {
        all.extend(mdata::ingest_alpaca(&p, Source::AlpacaGpt4Zh, lenient).map_err(py_err)?.samples);
    }
    if let Some(p) = sharegpt {
        all.extend(mdata::ingest_sharegpt(&p, lenient).map_err(py_err)?.samples);
    }
    let (kept, _) = mdata::clean_filter(all, &CleanRules { max_seq_len });
    mdata::write_corpus(&out, &kept).map_err(py_err)?;
    to_py(py, &mdata::dataset_stats(&kept))
}

#[pyfunction]
fn dataset_stats<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let samples = mdata::read_corpus(&path).map_err(py_err)?;
    to_py(py, &mdata::dataset_stats(&samples))
}

/// Fine-tunes `model` in place on a JSONL corpus and returns the per-step
/// losses. Checkpoints go to `out_dir` when given.
#[pyfunction]
#[pyo3(signature = (model, data, config=None, out_dir=None))]
fn train(model: &mut PyModel, data: PathBuf, config: Option<&str>, out_dir: Option<PathBuf>) -> PyResult<Vec<f32>> {
    let cfg: TrainConfig = from_json(config)?;
    let limit = model.inner.config.max_seq_len + 1;
    let samples = mdata::read_corpus(&data)
        .map_err(py_err)?
        .iter()
        .map(|s| mdata::render_template(s, limit))
        .collect::<moetune::Result<Vec<_>>>()
        .map_err(py_err)?;
    let mut trainer = Trainer::new(model.inner.clone(), samples, cfg).map_err(py_err)?;
    let records = trainer.run(out_dir.as_deref()).map_err(py_err)?;
    model.inner = trainer.model;
    Ok(records.iter().map(|r| r.loss).collect())
}

/// Few-shot evaluation. `model` is a `Model` or a stub URI such as
/// `"oracle:"`, `"uniform:"` or `"random:7"`.
#[pyfunction]
#[pyo3(signature = (model, benchmark, data_dir, shots=5))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &Bound<'py, PyAny>,
    benchmark: &str,
    data_dir: PathBuf,
    shots: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let name: BenchmarkName = benchmark.parse().map_err(py_err)?;
    let spec = BenchmarkSpec::new(name).with_shots(shots);
    let bench = meval::load_benchmark(&data_dir, &spec).map_err(py_err)?;
    let report = if let Ok(m) = model.cast::<PyModel>() {
        let m = m.borrow();
        meval::evaluate(&m.inner as &dyn NextTokenModel, &bench, &spec)
    } else {
        let uri: String = model.extract()?;
        let stub = StubModel::from_uri(&uri, &bench, &spec)
            .map_err(py_err)?
            .ok_or_else(|| PyValueError::new_err(format!("not a stub model: {uri:?}")))?;
        meval::evaluate(&stub, &bench, &spec)
    }
    .map_err(py_err)?;
    to_py(py, &report)
}

#[pymodule(name = "moetune")]
fn moetune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(prepare_data, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("VOCAB_SIZE", tokenizer::VOCAB_SIZE)?;
    Ok(())
}
