//! Class-incremental scenarios: pre-training, the task loop, the four
//! baselines and Native or Latent experience replay.

mod buffer;
mod report;

pub use buffer::{
    balanced_quotas, capacity_from_bits, label_bits, native_payload, payload_bits, ReplayBuffer, ReplayMode,
    UpdateStats,
};
pub use report::{Phase, ReportRow, RunReport, ABSENT};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Model, OutputLayer};
use crate::data::{LabeledDataset, Subset, TaskSplit};
use crate::encode::Encoding;
use crate::error::{cfg_err, Result};
use crate::loss::{LossConfig, Projector};
use crate::metrics::{MetricRow, Split, SubsetName};
use crate::qat::{StrongAugment, TrainConfig};
use crate::seed;
use crate::train::{eval_threads, fit, label_weights, predict_all, FitSpec, Item, Payload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Fine-tune on each task alone.
    Naive,
    NaiveReset,
    /// Train on every sample seen so far.
    Cumulative,
    CumulativeReset,
    ErNative,
    ErLatent,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Naive,
        Strategy::NaiveReset,
        Strategy::Cumulative,
        Strategy::CumulativeReset,
        Strategy::ErNative,
        Strategy::ErLatent,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::NaiveReset => "naive-reset",
            Strategy::Cumulative => "cumulative",
            Strategy::CumulativeReset => "cumulative-reset",
            Strategy::ErNative => "er-native",
            Strategy::ErLatent => "er-latent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }

    /// Re-draws all weights before every task.
    pub fn resets(&self) -> bool {
        matches!(self, Strategy::NaiveReset | Strategy::CumulativeReset)
    }

    pub fn mode(&self) -> ReplayMode {
        match self {
            Strategy::ErLatent => ReplayMode::Latent,
            _ => ReplayMode::Native,
        }
    }
}

/// Whether pre-training classes stay in the head during the tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    /// Retain: keep the classifier and seed the buffer with pre-training data.
    Rpt,
    /// Forget: drop the pre-training classes and reset the classifier.
    Fpt,
}

/// Replay memory size, as a sample count or a bit budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferSize {
    Samples(usize),
    Bits(u64),
}

impl BufferSize {
    /// Budget of `mb` megabits, 1 Mb being 10⁶ bits.
    pub fn megabits(mb: f64) -> Self {
        BufferSize::Bits((mb * 1e6).round() as u64)
    }
}

/// Everything that determines a scenario run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub strategy: Strategy,
    pub variant: Variant,
    /// Ignored by the naive and cumulative strategies.
    pub buffer: BufferSize,
    pub arch: ArchSpec,
    pub encoding: Encoding,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub pretrain_train: TrainConfig,
    pub pretrain_loss: LossConfig,
    pub strong: StrongAugment,
    /// Storage cost of a native pixel; defaults to the encoding's.
    pub native_bits_per_pixel: Option<usize>,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Defaults for `arch` and `encoding` with a single seed.
    pub fn new(strategy: Strategy, variant: Variant, buffer: BufferSize, arch: ArchSpec, encoding: Encoding, seed: u64) -> Self {
        ScenarioSpec {
            strategy,
            variant,
            buffer,
            arch,
            encoding,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            pretrain_train: TrainConfig::default(),
            pretrain_loss: LossConfig::default(),
            strong: StrongAugment::default(),
            native_bits_per_pixel: None,
            seed,
        }
    }

    /// Bits a native entry costs for `h`×`w` inputs.
    pub fn native_payload(&self, h: usize, w: usize) -> u64 {
        native_payload(h, w, self.native_bits_per_pixel.unwrap_or(self.encoding.bits_per_pixel()))
    }

    /// Bits a stored entry's payload costs under this strategy.
    pub fn entry_payload(&self) -> u64 {
        match self.strategy.mode() {
            ReplayMode::Native => self.native_payload(self.arch.input[0], self.arch.input[1]),
            ReplayMode::Latent => self.arch.latent as u64,
        }
    }
}

/// Datasets and the split that indexes them.
#[derive(Clone, Copy, Debug)]
pub struct Stream<'a> {
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub split: &'a TaskSplit,
}

impl Stream<'_> {
    fn items(&self, ds: &LabeledDataset, idx: &[usize], map: &[usize]) -> Vec<Item> {
        idx.iter()
            .map(|i| Item::image(ds.images[*i].clone(), out_index(map, ds.labels[*i])))
            .collect()
    }
}

/// Output index of dataset class `c`.
fn out_index(map: &[usize], c: usize) -> usize {
    map.iter().position(|x| *x == c).expect("class registered in the head")
}

/// Resumable scenario progress.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioState {
    pub model: Model,
    pub buffer: ReplayBuffer,
    /// Dataset class of every output, in head order.
    pub class_map: Vec<usize>,
    /// Index of the next task to run.
    pub next_task: usize,
    pub fe_frozen: bool,
    /// Classes left without a buffer slot, per update.
    pub zero_quota: Vec<usize>,
    pub report: RunReport,
}

impl ScenarioState {
    pub fn is_done(&self, stream: &Stream) -> bool {
        self.next_task >= stream.split.tasks.len()
    }
}

const PT_TAG: u64 = u64::MAX;

#[derive(Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Init = 0,
    Fit = 1,
    Buffer = 2,
    Projector = 3,
}

fn rng_for(spec: &ScenarioSpec, phase: u64, purpose: Purpose) -> seed::Rng {
    seed::stream(spec.seed, &[phase, purpose as u64])
}

fn validate(spec: &ScenarioSpec, stream: &Stream) -> Result<()> {
    spec.encoding.validate()?;
    let img = match stream.train.images.first() {
        Some(img) => img,
        None => return cfg_err("empty training dataset"),
    };
    let want = [img.height, img.width, spec.encoding.channels()];
    if spec.arch.input != want {
        return cfg_err(format!("architecture input {:?} differs from encoded data {want:?}", spec.arch.input));
    }
    if stream.split.tasks.is_empty() {
        return cfg_err("scenario has no tasks");
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in stream.split.all_classes() {
        if !seen.insert(c) {
            return cfg_err(format!("class {c} appears in two phases"));
        }
    }
    Ok(())
}

fn new_buffer(spec: &ScenarioSpec, stream: &Stream) -> Result<ReplayBuffer> {
    let lb = label_bits(stream.split.all_classes().len());
    let mode = spec.strategy.mode();
    match spec.strategy {
        Strategy::Naive | Strategy::NaiveReset => Ok(ReplayBuffer::new(mode, 0, lb)),
        Strategy::Cumulative | Strategy::CumulativeReset => Ok(ReplayBuffer::new(mode, usize::MAX, lb)),
        Strategy::ErNative | Strategy::ErLatent => match spec.buffer {
            BufferSize::Samples(n) => {
                let mut b = ReplayBuffer::new(mode, n, lb);
                b.entry_payload_bits = Some(spec.entry_payload());
                Ok(b)
            }
            BufferSize::Bits(m_b) => ReplayBuffer::with_budget(mode, m_b, spec.entry_payload(), lb),
        },
    }
}

fn fit_spec(spec: &ScenarioSpec, pretrain: bool, freeze_fe: bool) -> FitSpec {
    let (train, loss) = if pretrain {
        (&spec.pretrain_train, &spec.pretrain_loss)
    } else {
        (&spec.train, &spec.loss)
    };
    let mut f = FitSpec::new(train.clone(), loss.clone(), spec.encoding);
    f.freeze_fe = freeze_fe;
    f.pretrain = pretrain;
    f.strong = spec.strong.clone();
    f
}

/// Converts finished-task samples to buffer payloads.
fn to_payloads(state: &ScenarioState, spec: &ScenarioSpec, items: Vec<Item>) -> Result<Vec<Item>> {
    let cumulative = matches!(spec.strategy, Strategy::Cumulative | Strategy::CumulativeReset);
    items
        .into_iter()
        .map(|it| {
            let Payload::Image(img) = it.payload else {
                return Ok(it);
            };
            let payload = if cumulative {
                Payload::Image(img)
            } else {
                match state.buffer.mode {
                    ReplayMode::Native => Payload::Quantized(spec.encoding.quantize(&img)?),
                    ReplayMode::Latent => Payload::Latent(state.model.infer_latent(&spec.encoding.encode(&img)?)?),
                }
            };
            Ok(Item { payload, label: it.label })
        })
        .collect()
}

fn update_buffer(state: &mut ScenarioState, spec: &ScenarioSpec, items: Vec<Item>, phase: u64) -> Result<()> {
    if state.buffer.capacity == 0 {
        return Ok(());
    }
    let payloads = to_payloads(state, spec, items)?;
    let stats = state.buffer.update(payloads, &mut rng_for(spec, phase, Purpose::Buffer));
    state.zero_quota.push(stats.zero_quota_classes);
    Ok(())
}

/// Builds the model, runs the pre-training phase if the split has one and
/// prepares the buffer for task 0.
pub fn start_scenario(spec: &ScenarioSpec, stream: &Stream) -> Result<ScenarioState> {
    validate(spec, stream)?;
    let mut init = rng_for(spec, PT_TAG, Purpose::Init);
    let mut state = ScenarioState {
        model: Model::build(&spec.arch, 0, &mut init)?,
        buffer: new_buffer(spec, stream)?,
        class_map: Vec::new(),
        next_task: 0,
        fe_frozen: false,
        zero_quota: Vec::new(),
        report: RunReport::default(),
    };
    let Some(pt) = &stream.split.pretrain else {
        return Ok(state);
    };
    state.class_map = pt.classes.clone();
    state.model.grow_head(pt.classes.len(), &mut init)?;
    let train = stream.items(stream.train, &pt.train, &state.class_map);
    let val = stream.items(stream.train, &pt.val, &state.class_map);
    let mut fs = fit_spec(spec, true, false);
    if fs.loss.weighted {
        fs.class_weights = label_weights(&train, state.model.n_classes())?;
    }
    let mut projector = (fs.loss.beta > 0.0).then(|| {
        Projector::new(
            state.model.latent_dim(),
            fs.loss.projector_width,
            &mut rng_for(spec, PT_TAG, Purpose::Projector),
        )
    });
    let fr = fit(&mut state.model, &train, &val, &fs, projector.as_mut(), &mut rng_for(spec, PT_TAG, Purpose::Fit))?;
    let rows = evaluate(&state, spec, stream, None, &state.buffer.clone())?;
    push_rows(&mut state, Phase::Pretrain, &rows, fr.epochs);

    if spec.strategy == Strategy::ErLatent {
        state.fe_frozen = true;
    }
    match spec.variant {
        Variant::Rpt => update_buffer(&mut state, spec, train, PT_TAG)?,
        Variant::Fpt => {
            state.model.reset_classifier(&mut init)?;
            state.model.head = OutputLayer::new(state.model.head.fan_in, 0, spec.arch.output_c, &mut init);
            state.class_map.clear();
        }
    }
    Ok(state)
}

fn push_rows(state: &mut ScenarioState, phase: Phase, rows: &[MetricRow], epochs: usize) {
    let (bits, n) = (state.buffer.used_bits(), state.buffer.len());
    state
        .report
        .rows
        .extend(rows.iter().map(|m| ReportRow::from_metric(phase, m, epochs, bits, n)));
}

/// Trains the next task, updates the buffer and records its metrics.
pub fn run_task(state: &mut ScenarioState, spec: &ScenarioSpec, stream: &Stream) -> Result<()> {
    let t = state.next_task;
    let Some(task) = stream.split.tasks.get(t) else {
        return cfg_err(format!("scenario has no task {t}"));
    };
    let tag = t as u64;
    let mut init = rng_for(spec, tag, Purpose::Init);
    if state.class_map.iter().any(|c| task.classes.contains(c)) {
        return cfg_err(format!("task {t} repeats a known class"));
    }
    state.class_map.extend(&task.classes);
    state.model.grow_head(state.class_map.len(), &mut init)?;
    if spec.strategy.resets() {
        state.model.reset_all(&mut init)?;
    }

    let current = stream.items(stream.train, &task.train, &state.class_map);
    let val = stream.items(stream.train, &task.val, &state.class_map);
    let mut train = current.clone();
    train.extend(state.buffer.entries.iter().cloned());
    let mut fs = fit_spec(spec, false, state.fe_frozen);
    if fs.loss.weighted {
        fs.class_weights = label_weights(&train, state.model.n_classes())?;
    }
    let fr = fit(&mut state.model, &train, &val, &fs, None, &mut rng_for(spec, tag, Purpose::Fit))?;
    drop(train);

    if spec.strategy == Strategy::ErLatent {
        state.fe_frozen = true;
    }
    let snapshot = state.buffer.clone();
    update_buffer(state, spec, current, tag)?;
    let rows = evaluate(state, spec, stream, Some(t), &snapshot)?;
    push_rows(state, Phase::Task(t), &rows, fr.epochs);
    state.next_task += 1;
    Ok(())
}

/// Runs every remaining task of `state`.
pub fn resume_scenario(mut state: ScenarioState, spec: &ScenarioSpec, stream: &Stream) -> Result<ScenarioState> {
    while !state.is_done(stream) {
        run_task(&mut state, spec, stream)?;
    }
    Ok(state)
}

pub fn run_scenario(spec: &ScenarioSpec, stream: &Stream) -> Result<RunReport> {
    let state = start_scenario(spec, stream)?;
    Ok(resume_scenario(state, spec, stream)?.report)
}

/// Metric rows of every subset and split. `task` is `None` for the
/// pre-training phase; `buffer` is the memory the model was trained with.
fn evaluate(state: &ScenarioState, spec: &ScenarioSpec, stream: &Stream, task: Option<usize>, buffer: &ReplayBuffer) -> Result<Vec<MetricRow>> {
    let split = stream.split;
    let map = &state.class_map;
    let known = |s: &&Subset| s.classes.iter().all(|c| map.contains(c));
    let phases: Vec<&Subset> = split.pretrain.iter().filter(known).chain(split.tasks.iter().filter(known)).collect();
    let idx = |classes: &[usize]| -> Vec<usize> { classes.iter().map(|c| out_index(map, *c)).collect() };

    let pt = split.pretrain.as_ref().filter(|p| known(p)).map(|p| idx(&p.classes));
    let (old, new) = match task {
        Some(t) => ((t > 0).then(|| idx(&split.tasks[0].classes)), Some(idx(&split.tasks[t].classes))),
        None => (None, None),
    };
    let seen: Vec<usize> = (0..map.len()).collect();
    let last = task.is_some_and(|t| t + 1 == split.tasks.len());
    let buf_classes = (task.is_some() && !buffer.is_empty()).then(|| {
        let mut c: Vec<usize> = buffer.classes().iter().copied().filter(|c| buffer.count_of(*c) > 0).collect();
        c.sort_unstable();
        c
    });

    let threads = eval_threads();
    let mut rows = Vec::with_capacity(12);
    for which in [Split::Train, Split::Test] {
        let items: Vec<Item> = match which {
            Split::Train => phases.iter().flat_map(|p| stream.items(stream.train, &p.train, map)).collect(),
            Split::Test => phases.iter().flat_map(|p| stream.items(stream.test, &p.test, map)).collect(),
        };
        let preds = predict_all(&state.model, &items, spec.encoding, threads)?;
        let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
        let row = |name: SubsetName, classes: Option<&Vec<usize>>| match classes {
            Some(c) => MetricRow::compute(name, which, &preds, &labels, c),
            None => MetricRow::absent(name, which),
        };
        rows.push(row(SubsetName::Pt, pt.as_ref()));
        rows.push(row(SubsetName::Old, old.as_ref()));
        rows.push(row(SubsetName::New, new.as_ref()));
        rows.push(row(SubsetName::Seen, Some(&seen)));
        rows.push(row(SubsetName::Final, last.then_some(&seen)));
        rows.push(match (&buf_classes, which) {
            (Some(c), Split::Train) => {
                let bp = predict_all(&state.model, &buffer.entries, spec.encoding, threads)?;
                let bl: Vec<usize> = buffer.entries.iter().map(|e| e.label).collect();
                MetricRow::compute(SubsetName::Buffer, which, &bp, &bl, c)
            }
            (Some(c), Split::Test) => MetricRow::compute(SubsetName::Buffer, which, &preds, &labels, c),
            (None, _) => MetricRow::absent(SubsetName::Buffer, which),
        });
    }
    Ok(rows)
}

/// One budget and mode of an iso-memory comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub budget_bits: u64,
    pub mode: ReplayMode,
    /// Buffer capacity in samples.
    pub samples: usize,
    /// Bits per stored sample, label included.
    pub entry_bits: u64,
    pub final_acc: Option<f64>,
    pub new_acc: Option<f64>,
    pub buffer_train: Option<f64>,
    pub buffer_test: Option<f64>,
    pub report: RunReport,
}

/// Runs Native and Latent replay at every bit budget of `budgets`.
pub fn iso_memory_sweep(base: &ScenarioSpec, stream: &Stream, budgets: &[u64]) -> Result<Vec<SweepPoint>> {
    let last = Phase::Task(stream.split.tasks.len().saturating_sub(1));
    let mut out = Vec::with_capacity(budgets.len() * 2);
    for &b in budgets {
        for strategy in [Strategy::ErNative, Strategy::ErLatent] {
            let spec = ScenarioSpec {
                strategy,
                buffer: BufferSize::Bits(b),
                ..base.clone()
            };
            let buf = new_buffer(&spec, stream)?;
            let report = run_scenario(&spec, stream)?;
            out.push(SweepPoint {
                budget_bits: b,
                mode: buf.mode,
                samples: buf.capacity,
                entry_bits: spec.entry_payload() + buf.label_bits as u64,
                final_acc: report.accuracy(last, SubsetName::Final, Split::Test),
                new_acc: report.accuracy(last, SubsetName::New, Split::Test),
                buffer_train: report.accuracy(last, SubsetName::Buffer, Split::Train),
                buffer_test: report.accuracy(last, SubsetName::Buffer, Split::Test),
                report,
            });
        }
    }
    Ok(out)
}

/// CSV of sweep points, one row per budget and mode.
pub fn sweep_csv(points: &[SweepPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |v: Option<f64>| v.map_or_else(|| ABSENT.to_string(), |x| format!("{x}"));
    let err = |e: csv::Error| crate::Error::Format(e.to_string());
    w.write_record(["budgetBits", "mode", "samples", "entryBits", "final", "new", "bufferTrain", "bufferTest"])
        .map_err(err)?;
    for p in points {
        let mode = match p.mode {
            ReplayMode::Native => "native",
            ReplayMode::Latent => "latent",
        };
        w.write_record([
            p.budget_bits.to_string(),
            mode.to_string(),
            p.samples.to_string(),
            p.entry_bits.to_string(),
            fmt(p.final_acc),
            fmt(p.new_acc),
            fmt(p.buffer_train),
            fmt(p.buffer_test),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| crate::Error::Format(e.to_string()))
}
