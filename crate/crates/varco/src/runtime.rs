//! The distributed training loop.
//!
//! `Q` workers each hold the rows of the graph they own, a replica of the
//! model, and routing tables for their boundary nodes. One epoch runs:
//!
//! 1. layer-synchronous forward — before each diffusion round the owners
//!    compress and ship the activations of boundary nodes, so at ratio 1
//!    the distributed pass reproduces centralized training exactly;
//! 2. backward — gradient contributions for remote nodes are masked by the
//!    *same* kept set the forward exchange used (the Jacobian of
//!    mask-and-zero-fill is the mask itself) and routed back to the owners;
//! 3. a local SGD step per worker, then server-style parameter averaging,
//!    which with identical starting replicas equals stepping with the mean
//!    gradient.
//!
//! Every float that crosses a worker boundary is counted in a
//! [`CommLedger`]; evaluation passes always run lossless and are never
//! counted. Workers communicate only through per-pair message channels
//! routed between barrier-separated phases, so the sequential and threaded
//! execution modes produce bitwise-identical results. Setting
//! `VARCO_TRANSPORT=socket` pushes every exchanged block through a loopback
//! TCP socket in the pinned wire format (which quantizes payloads to f32;
//! the in-memory default keeps full f64 precision).

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};

use crate::codec::{kept_count, Codec, CompressedBlock, Direction, KeyContext};
use crate::error::{Error, Result};
use crate::graph::{Graph, Gso};
use crate::mat::Mat;
use crate::model::{sgd_step, Gradients, LossKind, ModelParams, Nonlinearity};
use crate::partition::Partition;
use crate::sched::{ratio_at, SchedulerSpec};

/// How per-worker compute phases are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Round-robin on the calling thread.
    Sequential,
    /// One scoped thread per worker between barriers.
    Threaded,
}

impl ExecMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ExecMode::Sequential),
            "threaded" => Ok(ExecMode::Threaded),
            other => Err(Error::Config(format!("unknown exec mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExecMode::Sequential => "sequential",
            ExecMode::Threaded => "threaded",
        }
    }
}

/// Message channel between workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Memory,
    Socket,
}

pub const TRANSPORT_ENV: &str = "VARCO_TRANSPORT";

impl Transport {
    /// Read `VARCO_TRANSPORT` (`memory` default, or `socket`).
    pub fn from_env() -> Result<Self> {
        match std::env::var(TRANSPORT_ENV) {
            Err(_) => Ok(Transport::Memory),
            Ok(v) if v == "memory" || v.is_empty() => Ok(Transport::Memory),
            Ok(v) if v == "socket" => Ok(Transport::Socket),
            Ok(v) => Err(Error::Config(format!(
                "{TRANSPORT_ENV} must be 'memory' or 'socket', got {v:?}"
            ))),
        }
    }
}

/// Exact per-phase communication counters. Floats count f32 wire slots;
/// messages count compressed blocks (plus one per parameter transfer).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub forward_floats: u64,
    pub backward_floats: u64,
    pub param_floats: u64,
    pub forward_messages: u64,
    pub backward_messages: u64,
    pub param_messages: u64,
}

impl CommLedger {
    pub fn merge(&mut self, other: &CommLedger) {
        self.forward_floats += other.forward_floats;
        self.backward_floats += other.backward_floats;
        self.param_floats += other.param_floats;
        self.forward_messages += other.forward_messages;
        self.backward_messages += other.backward_messages;
        self.param_messages += other.param_messages;
    }

    pub fn activation_floats(&self) -> u64 {
        self.forward_floats + self.backward_floats
    }

    pub fn total_floats(&self) -> u64 {
        self.activation_floats() + self.param_floats
    }
}

/// One ordered worker pair's share of the exchange: which nodes move from
/// `src` to `dst`, as owner-local and consumer-halo row indices.
#[derive(Debug, Clone)]
pub struct PlanPair {
    pub src: usize,
    pub dst: usize,
    /// Global node ids, sorted ascending.
    pub nodes: Vec<u32>,
    /// Row of each node in the owner's owned slice.
    pub src_rows: Vec<u32>,
    /// Row of each node in the consumer's halo buffer.
    pub dst_rows: Vec<u32>,
}

/// All nonempty ordered pairs, sorted by `(src, dst)`.
#[derive(Debug, Clone)]
pub struct ExchangePlan {
    pub pairs: Vec<PlanPair>,
}

impl ExchangePlan {
    pub fn build(p: &Partition) -> ExchangePlan {
        let q = p.num_workers();
        let mut pairs = Vec::new();
        for src in 0..q {
            for dst in 0..q {
                let nodes = p.halo_out(src, dst);
                if nodes.is_empty() {
                    continue;
                }
                let src_rows = nodes
                    .iter()
                    .map(|&v| p.local_nodes(src).binary_search(&v).unwrap() as u32)
                    .collect();
                let dst_rows = nodes
                    .iter()
                    .map(|&v| p.halo_in(dst).binary_search(&v).unwrap() as u32)
                    .collect();
                pairs.push(PlanPair {
                    src,
                    dst,
                    nodes: nodes.to_vec(),
                    src_rows,
                    dst_rows,
                });
            }
        }
        ExchangePlan { pairs }
    }
}

/// Column reference in a worker-local operator row: either another owned
/// row or a halo-buffer row.
#[derive(Debug, Clone, Copy)]
enum ColRef {
    Local(u32),
    Halo(u32),
}

/// The worker's slice of the shift operator: its owned rows, with columns
/// remapped to owned/halo indices.
#[derive(Debug, Clone)]
struct WorkerGso {
    offsets: Vec<usize>,
    cols: Vec<ColRef>,
    vals: Vec<f64>,
}

impl WorkerGso {
    fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// One diffusion step over owned rows, mixing local and halo values.
    fn apply(&self, local: &Mat, halo: &Mat) -> Mat {
        let f = local.cols();
        let mut out = Mat::zeros(self.rows(), f);
        for u in 0..self.rows() {
            for idx in self.offsets[u]..self.offsets[u + 1] {
                let s = self.vals[idx];
                let src_row = match self.cols[idx] {
                    ColRef::Local(i) => local.row(i as usize),
                    ColRef::Halo(j) => halo.row(j as usize),
                };
                let lo = u * f;
                let out_row = &mut out.data_mut()[lo..lo + f];
                for (o, &v) in out_row.iter_mut().zip(src_row) {
                    *o += s * v;
                }
            }
        }
        out
    }

    /// Transpose application: scatter each owned row's gradient to the
    /// owned/halo accumulators it touches.
    fn scatter_transpose(&self, dz: &Mat, halo_rows: usize) -> (Mat, Mat) {
        let f = dz.cols();
        let mut local_acc = Mat::zeros(self.rows(), f);
        let mut halo_acc = Mat::zeros(halo_rows, f);
        for u in 0..self.rows() {
            let row = dz.row(u);
            for idx in self.offsets[u]..self.offsets[u + 1] {
                let s = self.vals[idx];
                let acc_row = match self.cols[idx] {
                    ColRef::Local(i) => local_acc.row_mut(i as usize),
                    ColRef::Halo(j) => halo_acc.row_mut(j as usize),
                };
                for (a, &v) in acc_row.iter_mut().zip(row) {
                    *a += s * v;
                }
            }
        }
        (local_acc, halo_acc)
    }
}

/// Per-layer forward state retained for the backward pass (owned rows only).
#[derive(Debug, Clone)]
struct WorkerLayerTape {
    diffused: Vec<Mat>,
    pre: Mat,
    nonlinearity: Nonlinearity,
}

/// One training worker: its graph slice, model replica, tape, and scratch.
/// Workers never read features or activations of non-halo remote nodes.
#[derive(Debug, Clone)]
pub struct Worker {
    id: usize,
    owned: Vec<u32>,
    halo: Vec<u32>,
    features: Mat,
    labels: Vec<u32>,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
    gso: WorkerGso,
    params: ModelParams,
    /// `Q * local_train / global_train`, so the mean of the per-worker
    /// gradients is exactly the centralized gradient of the global mean
    /// loss.
    loss_weight: f64,
    // per-epoch state
    tape: Vec<WorkerLayerTape>,
    grads: Option<Gradients>,
    input_grad: Option<Mat>,
    // scratch between phases
    act: Mat,
    diffused: Vec<Mat>,
    halo_buf: Mat,
    dpre: Mat,
    dz: Mat,
    bwd_local: Mat,
}

impl Worker {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn owned_nodes(&self) -> &[u32] {
        &self.owned
    }

    pub fn halo_nodes(&self) -> &[u32] {
        &self.halo
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn set_params(&mut self, params: ModelParams) {
        self.params = params;
    }

    pub fn grads(&self) -> Option<&Gradients> {
        self.grads.as_ref()
    }

    /// Gradient of the loss with respect to this worker's input features,
    /// available after a backward pass.
    pub fn input_grad(&self) -> Option<&Mat> {
        self.input_grad.as_ref()
    }

    pub fn loss_weight(&self) -> f64 {
        self.loss_weight
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// Split the graph across the partition's workers, replicating the model.
pub fn make_workers(
    g: &Graph,
    p: &Partition,
    gso: &Gso,
    params: &ModelParams,
) -> Result<(Vec<Worker>, ExchangePlan)> {
    if p.owner().len() != g.num_nodes() {
        return Err(Error::Shape("partition does not match graph".into()));
    }
    if g.feat_dim() != params.dims()[0] {
        return Err(Error::Shape(format!(
            "graph features {} != model input {}",
            g.feat_dim(),
            params.dims()[0]
        )));
    }
    let q = p.num_workers();
    let global_train = g.train_mask().iter().filter(|&&b| b).count();
    if global_train == 0 {
        return Err(Error::InvalidArgument("no training nodes".into()));
    }
    let plan = ExchangePlan::build(p);

    // position of each node within its owner's sorted owned list
    let mut owned_pos = vec![0u32; g.num_nodes()];
    for w in 0..q {
        for (i, &v) in p.local_nodes(w).iter().enumerate() {
            owned_pos[v as usize] = i as u32;
        }
    }

    let mut workers = Vec::with_capacity(q);
    for w in 0..q {
        let owned = p.local_nodes(w).to_vec();
        let halo = p.halo_in(w).to_vec();
        let mut halo_pos = vec![u32::MAX; g.num_nodes()];
        for (j, &v) in halo.iter().enumerate() {
            halo_pos[v as usize] = j as u32;
        }

        let mut features = Mat::zeros(owned.len(), g.feat_dim());
        let mut labels = Vec::with_capacity(owned.len());
        let mut train_mask = Vec::with_capacity(owned.len());
        let mut val_mask = Vec::with_capacity(owned.len());
        let mut test_mask = Vec::with_capacity(owned.len());
        for (i, &v) in owned.iter().enumerate() {
            let v = v as usize;
            features.row_mut(i).copy_from_slice(g.features().row(v));
            labels.push(g.labels()[v]);
            train_mask.push(g.train_mask()[v]);
            val_mask.push(g.val_mask()[v]);
            test_mask.push(g.test_mask()[v]);
        }

        let mut offsets = Vec::with_capacity(owned.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        offsets.push(0);
        for &u in &owned {
            let (row_cols, row_vals) = gso.row(u as usize);
            for (&v, &s) in row_cols.iter().zip(row_vals) {
                let col = if p.owner_of(v as usize) == w {
                    ColRef::Local(owned_pos[v as usize])
                } else {
                    ColRef::Halo(halo_pos[v as usize])
                };
                cols.push(col);
                vals.push(s);
            }
            offsets.push(cols.len());
        }

        let local_train = train_mask.iter().filter(|&&b| b).count();
        let loss_weight = q as f64 * local_train as f64 / global_train as f64;

        workers.push(Worker {
            id: w,
            owned,
            halo,
            features,
            labels,
            train_mask,
            val_mask,
            test_mask,
            gso: WorkerGso { offsets, cols, vals },
            params: params.clone(),
            loss_weight,
            tape: Vec::new(),
            grads: None,
            input_grad: None,
            act: Mat::zeros(0, 0),
            diffused: Vec::new(),
            halo_buf: Mat::zeros(0, 0),
            dpre: Mat::zeros(0, 0),
            dz: Mat::zeros(0, 0),
            bwd_local: Mat::zeros(0, 0),
        });
    }
    Ok((workers, plan))
}

/// Knobs shared by the exchange phases of one pass.
#[derive(Debug, Clone, Copy)]
pub struct ExchangeSettings {
    pub ratio: f64,
    pub epoch: u32,
    /// Halo buffers stay zero and nothing is sent or counted.
    pub no_comm: bool,
    /// Record traffic in the ledger (off for evaluation passes).
    pub count: bool,
}

/// Run a per-worker closure either in place or on scoped threads, returning
/// results in worker order either way.
fn par_zip<T: Send, R: Send>(
    exec: ExecMode,
    workers: &mut [Worker],
    items: Vec<T>,
    f: impl Fn(&mut Worker, T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    debug_assert_eq!(workers.len(), items.len());
    match exec {
        ExecMode::Sequential => workers
            .iter_mut()
            .zip(items)
            .map(|(w, t)| f(w, t))
            .collect(),
        ExecMode::Threaded => std::thread::scope(|s| {
            let f = &f;
            let handles: Vec<_> = workers
                .iter_mut()
                .zip(items)
                .map(|(w, t)| s.spawn(move || f(w, t)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        }),
    }
}

fn par_run<R: Send>(
    exec: ExecMode,
    workers: &mut [Worker],
    f: impl Fn(&mut Worker) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let units = vec![(); workers.len()];
    par_zip(exec, workers, units, |w, ()| f(w))
}

type Outbox = Vec<(usize, Vec<CompressedBlock>)>;
type Inbox = Vec<(usize, Vec<CompressedBlock>)>;

/// Move per-pair block batches from producers to consumers, counting traffic
/// and optionally pushing the bytes through the loopback sockets. Inboxes
/// are assembled in plan order, so receivers accumulate deterministically.
fn route_blocks(
    plan: &ExchangePlan,
    outboxes: Vec<Outbox>,
    to_dst: bool, // forward messages flow src->dst; backward flow dst->src
    transport: &mut Option<SocketTransport>,
    floats: &mut u64,
    messages: &mut u64,
) -> Result<Vec<Inbox>> {
    let num_workers = outboxes.len();
    let mut staged: Vec<Option<Vec<CompressedBlock>>> = vec![None; plan.pairs.len()];
    for outbox in outboxes {
        for (pair_idx, blocks) in outbox {
            staged[pair_idx] = Some(blocks);
        }
    }
    let mut inboxes: Vec<Inbox> = (0..num_workers).map(|_| Vec::new()).collect();
    for (pair_idx, slot) in staged.into_iter().enumerate() {
        let Some(blocks) = slot else { continue };
        for b in &blocks {
            *floats += b.wire_floats();
        }
        *messages += blocks.len() as u64;
        let blocks = match transport {
            Some(t) => t.transfer(pair_idx, blocks)?,
            None => blocks,
        };
        let pair = &plan.pairs[pair_idx];
        let receiver = if to_dst { pair.dst } else { pair.src };
        inboxes[receiver].push((pair_idx, blocks));
    }
    Ok(inboxes)
}

/// One forward diffusion round for layer `layer`: owners compress the
/// current diffusion state of their boundary nodes, consumers fill their
/// halo buffers, and every worker advances `Z_k = S Z_{k-1}` on its rows.
#[allow(clippy::too_many_arguments)]
fn forward_round(
    workers: &mut [Worker],
    plan: &ExchangePlan,
    codec: &Codec,
    settings: &ExchangeSettings,
    exec: ExecMode,
    transport: &mut Option<SocketTransport>,
    layer: usize,
    round: usize,
    ledger: &mut CommLedger,
) -> Result<()> {
    let ratio = settings.ratio;
    let epoch = settings.epoch;

    let inboxes: Vec<Inbox> = if settings.no_comm {
        (0..workers.len()).map(|_| Vec::new()).collect()
    } else {
        let outboxes: Vec<Outbox> = par_run(exec, workers, |w| {
            let mut out: Outbox = Vec::new();
            let z = w.diffused.last().expect("diffusion state missing");
            for (pair_idx, pair) in plan.pairs.iter().enumerate() {
                if pair.src != w.id {
                    continue;
                }
                let mut blocks = Vec::with_capacity(pair.nodes.len());
                for (i, &node) in pair.nodes.iter().enumerate() {
                    let ctx = KeyContext {
                        epoch,
                        layer: layer as u16,
                        round: round as u16,
                        src: pair.src as u16,
                        dst: pair.dst as u16,
                        node,
                        direction: Direction::Forward,
                    };
                    blocks.push(codec.compress(z.row(pair.src_rows[i] as usize), ratio, &ctx)?);
                }
                out.push((pair_idx, blocks));
            }
            Ok(out)
        })?;

        let mut floats = 0u64;
        let mut messages = 0u64;
        let inboxes = route_blocks(plan, outboxes, true, transport, &mut floats, &mut messages)?;
        if settings.count {
            ledger.forward_floats += floats;
            ledger.forward_messages += messages;
        }
        inboxes
    };

    par_zip(exec, workers, inboxes, |w, inbox| {
        let f = w.diffused.last().unwrap().cols();
        w.halo_buf = Mat::zeros(w.halo.len(), f);
        for (pair_idx, blocks) in inbox {
            let pair = &plan.pairs[pair_idx];
            for (i, block) in blocks.iter().enumerate() {
                let ctx = KeyContext {
                    epoch,
                    layer: layer as u16,
                    round: round as u16,
                    src: pair.src as u16,
                    dst: pair.dst as u16,
                    node: pair.nodes[i],
                    direction: Direction::Forward,
                };
                codec.expect_context(block, &ctx)?;
                let dense = crate::codec::decompress(block)?;
                w.halo_buf
                    .row_mut(pair.dst_rows[i] as usize)
                    .copy_from_slice(&dense);
            }
        }
        let next = w.gso.apply(w.diffused.last().unwrap(), &w.halo_buf);
        w.diffused.push(next);
        Ok(())
    })?;
    Ok(())
}

/// Layer-synchronous distributed forward pass; returns per-worker logits
/// over their owned rows and leaves the tape behind for backward.
#[allow(clippy::too_many_arguments)]
pub fn distributed_forward(
    workers: &mut [Worker],
    plan: &ExchangePlan,
    codec: &Codec,
    settings: &ExchangeSettings,
    nonlinearity: Nonlinearity,
    exec: ExecMode,
    transport: &mut Option<SocketTransport>,
    ledger: &mut CommLedger,
) -> Result<Vec<Mat>> {
    let num_layers = workers
        .first()
        .map(|w| w.params.num_layers())
        .ok_or_else(|| Error::InvalidArgument("no workers".into()))?;
    let taps = workers[0].params.taps();

    par_run(exec, workers, |w| {
        w.act = w.features.clone();
        w.tape.clear();
        w.grads = None;
        w.input_grad = None;
        Ok(())
    })?;

    for layer in 0..num_layers {
        par_run(exec, workers, |w| {
            let act = std::mem::replace(&mut w.act, Mat::zeros(0, 0));
            w.diffused = vec![act];
            Ok(())
        })?;
        for round in 1..taps {
            forward_round(
                workers, plan, codec, settings, exec, transport, layer, round, ledger,
            )?;
        }
        let rho = if layer + 1 == num_layers {
            Nonlinearity::Identity
        } else {
            nonlinearity
        };
        par_run(exec, workers, |w| {
            let taps_mats = w.params.layer(layer);
            let mut pre = w.diffused[0].matmul(&taps_mats[0])?;
            for (z, h) in w.diffused[1..].iter().zip(&taps_mats[1..]) {
                pre.add_assign(&z.matmul(h)?)?;
            }
            let post = pre.map(|v| rho.apply(v));
            let diffused = std::mem::take(&mut w.diffused);
            w.tape.push(WorkerLayerTape {
                diffused,
                pre,
                nonlinearity: rho,
            });
            w.act = post;
            Ok(())
        })?;
    }
    par_run(exec, workers, |w| Ok(w.act.clone()))
}

/// One backward diffusion round (the mirror of forward round `round` in
/// layer `layer`): consumers scatter `S^T dZ`, mask the remote parts with
/// the forward round's kept sets, and owners accumulate what comes back
/// plus their own local scatter and the direct tap term `dP H_{round-1}^T`.
#[allow(clippy::too_many_arguments)]
fn backward_round(
    workers: &mut [Worker],
    plan: &ExchangePlan,
    codec: &Codec,
    settings: &ExchangeSettings,
    exec: ExecMode,
    transport: &mut Option<SocketTransport>,
    layer: usize,
    round: usize,
    ledger: &mut CommLedger,
) -> Result<()> {
    let ratio = settings.ratio;
    let epoch = settings.epoch;

    let outboxes: Vec<Outbox> = par_run(exec, workers, |w| {
        let (local_acc, halo_acc) = w.gso.scatter_transpose(&w.dz, w.halo.len());
        w.bwd_local = local_acc;
        if settings.no_comm {
            return Ok(Vec::new());
        }
        let mut out: Outbox = Vec::new();
        for (pair_idx, pair) in plan.pairs.iter().enumerate() {
            if pair.dst != w.id {
                continue;
            }
            let mut blocks = Vec::with_capacity(pair.nodes.len());
            for (i, &node) in pair.nodes.iter().enumerate() {
                // mask identity is the forward context of this round
                let ctx = KeyContext {
                    epoch,
                    layer: layer as u16,
                    round: round as u16,
                    src: pair.src as u16,
                    dst: pair.dst as u16,
                    node,
                    direction: Direction::Forward,
                };
                blocks.push(codec.backward(
                    halo_acc.row(pair.dst_rows[i] as usize),
                    &ctx,
                    ratio,
                )?);
            }
            out.push((pair_idx, blocks));
        }
        Ok(out)
    })?;

    let inboxes = if settings.no_comm {
        (0..workers.len()).map(|_| Vec::new()).collect()
    } else {
        let mut floats = 0u64;
        let mut messages = 0u64;
        let inboxes = route_blocks(plan, outboxes, false, transport, &mut floats, &mut messages)?;
        if settings.count {
            ledger.backward_floats += floats;
            ledger.backward_messages += messages;
        }
        inboxes
    };

    par_zip(exec, workers, inboxes, |w, inbox| {
        let mut dz_next = std::mem::replace(&mut w.bwd_local, Mat::zeros(0, 0));
        let direct = w.dpre.matmul_transpose(&w.params.layer(layer)[round - 1])?;
        dz_next.add_assign(&direct)?;
        for (pair_idx, blocks) in inbox {
            let pair = &plan.pairs[pair_idx];
            for (i, block) in blocks.iter().enumerate() {
                let ctx = KeyContext {
                    epoch,
                    layer: layer as u16,
                    round: round as u16,
                    src: pair.src as u16,
                    dst: pair.dst as u16,
                    node: pair.nodes[i],
                    direction: Direction::Forward,
                };
                codec.expect_context(block, &ctx)?;
                let dense = crate::codec::decompress(block)?;
                let row = dz_next.row_mut(pair.src_rows[i] as usize);
                for (r, v) in row.iter_mut().zip(dense) {
                    *r += v;
                }
            }
        }
        w.dz = dz_next;
        Ok(())
    })?;
    Ok(())
}

/// Distributed backward pass. Takes the per-worker loss gradients over
/// owned rows, routes boundary error terms back through the compression
/// masks, and leaves each worker's parameter gradients (and input gradient)
/// behind. Backward traffic mirrors forward traffic exactly.
#[allow(clippy::too_many_arguments)]
pub fn distributed_backward(
    workers: &mut [Worker],
    plan: &ExchangePlan,
    codec: &Codec,
    settings: &ExchangeSettings,
    dlogits: Vec<Mat>,
    exec: ExecMode,
    transport: &mut Option<SocketTransport>,
    ledger: &mut CommLedger,
) -> Result<()> {
    let num_layers = workers
        .first()
        .map(|w| w.params.num_layers())
        .ok_or_else(|| Error::InvalidArgument("no workers".into()))?;
    let taps = workers[0].params.taps();

    par_zip(exec, workers, dlogits, |w, dl| {
        if w.tape.len() != num_layers {
            return Err(Error::InvalidArgument(
                "backward called without a forward tape".into(),
            ));
        }
        if dl.rows() != w.owned.len() {
            return Err(Error::Shape("dlogits rows != owned nodes".into()));
        }
        w.dz = dl;
        w.grads = Some(Gradients::zeros_like(&w.params));
        Ok(())
    })?;

    for layer in (0..num_layers).rev() {
        par_run(exec, workers, |w| {
            let dx = std::mem::replace(&mut w.dz, Mat::zeros(0, 0));
            let entry = &w.tape[layer];
            let dpre = match entry.nonlinearity {
                Nonlinearity::Identity => dx,
                rho => {
                    let deriv = entry.pre.map(|v| rho.derivative(v));
                    dx.elementwise_mul(&deriv)?
                }
            };
            let grads = w.grads.as_mut().unwrap();
            for k in 0..taps {
                grads.layers[layer][k] = entry.diffused[k].transpose_matmul(&dpre)?;
            }
            w.dz = dpre.matmul_transpose(&w.params.layer(layer)[taps - 1])?;
            w.dpre = dpre;
            Ok(())
        })?;
        for round in (1..taps).rev() {
            backward_round(
                workers, plan, codec, settings, exec, transport, layer, round, ledger,
            )?;
        }
    }
    par_run(exec, workers, |w| {
        w.input_grad = Some(std::mem::replace(&mut w.dz, Mat::zeros(0, 0)));
        w.dpre = Mat::zeros(0, 0);
        Ok(())
    })?;
    Ok(())
}

/// Server step: replace every replica with the uniform mean of all
/// replicas, counting one round trip of the full parameter set per worker.
pub fn average_params(workers: &mut [Worker], ledger: &mut CommLedger) -> Result<ModelParams> {
    let first = workers
        .first()
        .ok_or_else(|| Error::InvalidArgument("no workers".into()))?;
    let mut mean = first.params.clone();
    for w in workers.iter().skip(1) {
        for l in 0..mean.num_layers() {
            for (acc, m) in mean.layer_mut(l).iter_mut().zip(w.params.layer(l)) {
                acc.add_assign(m)?;
            }
        }
    }
    let scale = 1.0 / workers.len() as f64;
    for l in 0..mean.num_layers() {
        for acc in mean.layer_mut(l) {
            acc.scale(scale);
        }
    }
    let param_count = mean.num_params() as u64;
    ledger.param_floats += 2 * workers.len() as u64 * param_count;
    ledger.param_messages += 2 * workers.len() as u64;
    for w in workers.iter_mut() {
        w.params = mean.clone();
    }
    Ok(mean)
}

/// Closed-form float count of one distributed forward pass: every layer
/// runs `taps - 1` exchange rounds, each moving `kept(width, ratio)` floats
/// per boundary node per ordered pair. Backward volume equals forward
/// volume by mask reuse.
pub fn expected_forward_floats(p: &Partition, dims: &[usize], taps: usize, ratio: f64) -> u64 {
    let q = p.num_workers();
    let mut pair_nodes = 0u64;
    for src in 0..q {
        for dst in 0..q {
            pair_nodes += p.halo_out(src, dst).len() as u64;
        }
    }
    let mut total = 0u64;
    for l in 1..dims.len() {
        let width = dims[l - 1];
        total += (taps as u64 - 1) * pair_nodes * kept_count(width, ratio) as u64;
    }
    total
}

/// One epoch's row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Scheduler ratio; infinity for the no-communication arm.
    pub ratio: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub fwd_floats: u64,
    pub bwd_floats: u64,
    pub param_floats: u64,
    pub cum_floats: u64,
}

/// Everything fixed for a training run.
#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub nonlinearity: Nonlinearity,
    pub loss: LossKind,
    pub eta: f64,
    pub no_comm: bool,
    pub exec: ExecMode,
    pub transport: Transport,
}

/// Drives epochs over a worker set and accumulates the ledger.
pub struct Trainer {
    workers: Vec<Worker>,
    plan: ExchangePlan,
    codec: Codec,
    sched: SchedulerSpec,
    cfg: RuntimeConfig,
    transport: Option<SocketTransport>,
    ledger: CommLedger,
    cum_floats: u64,
    num_val: usize,
    num_test: usize,
}

impl Trainer {
    pub fn new(
        g: &Graph,
        p: &Partition,
        gso: &Gso,
        params: ModelParams,
        sched: SchedulerSpec,
        codec: Codec,
        cfg: RuntimeConfig,
    ) -> Result<Self> {
        sched.validate()?;
        if !(cfg.eta > 0.0) {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        let (workers, plan) = make_workers(g, p, gso, &params)?;
        let transport = match cfg.transport {
            Transport::Memory => None,
            Transport::Socket => Some(SocketTransport::connect(&plan)?),
        };
        Ok(Trainer {
            workers,
            plan,
            codec,
            sched,
            cfg,
            transport,
            ledger: CommLedger::default(),
            cum_floats: 0,
            num_val: g.val_mask().iter().filter(|&&b| b).count(),
            num_test: g.test_mask().iter().filter(|&&b| b).count(),
        })
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn plan(&self) -> &ExchangePlan {
        &self.plan
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    /// Current model; replicas are identical between epochs.
    pub fn params(&self) -> &ModelParams {
        &self.workers[0].params
    }

    /// Overwrite every replica (e.g. after an external spectral clip).
    pub fn set_params(&mut self, params: ModelParams) {
        for w in &mut self.workers {
            w.params = params.clone();
        }
    }

    /// Full train/step/average/evaluate cycle for epoch `t`.
    pub fn run_epoch(&mut self, t: usize) -> Result<MetricsRecord> {
        let ratio = ratio_at(&self.sched, t)?;
        let settings = ExchangeSettings {
            ratio,
            epoch: t as u32,
            no_comm: self.cfg.no_comm,
            count: true,
        };
        let mut epoch_ledger = CommLedger::default();

        let logits = distributed_forward(
            &mut self.workers,
            &self.plan,
            &self.codec,
            &settings,
            self.cfg.nonlinearity,
            self.cfg.exec,
            &mut self.transport,
            &mut epoch_ledger,
        )?;

        let mut train_loss = 0.0;
        let mut dlogits = Vec::with_capacity(self.workers.len());
        for (w, l) in self.workers.iter().zip(&logits) {
            if w.train_mask.iter().any(|&b| b) {
                let (loss, dl) = self
                    .cfg
                    .loss
                    .compute(l, &w.labels, &w.train_mask, w.loss_weight)?;
                train_loss += loss;
                dlogits.push(dl);
            } else {
                dlogits.push(Mat::zeros(l.rows(), l.cols()));
            }
        }
        train_loss /= self.workers.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "train loss is {train_loss} at epoch {t}"
            )));
        }

        distributed_backward(
            &mut self.workers,
            &self.plan,
            &self.codec,
            &settings,
            dlogits,
            self.cfg.exec,
            &mut self.transport,
            &mut epoch_ledger,
        )?;

        let eta = self.cfg.eta;
        par_run(self.cfg.exec, &mut self.workers, |w| {
            let grads = w.grads.as_ref().expect("backward left no gradients");
            w.params = sgd_step(&w.params, grads, eta)?;
            Ok(())
        })?;
        average_params(&mut self.workers, &mut epoch_ledger)?;

        let (val_acc, test_acc) = self.evaluate(t as u32)?;

        self.ledger.merge(&epoch_ledger);
        self.cum_floats += epoch_ledger.total_floats();
        Ok(MetricsRecord {
            epoch: t,
            ratio: if self.cfg.no_comm { f64::INFINITY } else { ratio },
            train_loss,
            val_acc,
            test_acc,
            fwd_floats: epoch_ledger.forward_floats,
            bwd_floats: epoch_ledger.backward_floats,
            param_floats: epoch_ledger.param_floats,
            cum_floats: self.cum_floats,
        })
    }

    /// Lossless evaluation pass over val/test nodes, never counted in the
    /// ledger (accuracy is a property of the learned model, not of
    /// compressed inference - the no-comm arm is evaluated with full halo
    /// exchange too).
    pub fn evaluate(&mut self, epoch: u32) -> Result<(f64, f64)> {
        let settings = ExchangeSettings {
            ratio: 1.0,
            epoch,
            no_comm: false,
            count: false,
        };
        let mut scratch = CommLedger::default();
        let logits = distributed_forward(
            &mut self.workers,
            &self.plan,
            &self.codec,
            &settings,
            self.cfg.nonlinearity,
            self.cfg.exec,
            &mut self.transport,
            &mut scratch,
        )?;
        let mut val_correct = 0u64;
        let mut test_correct = 0u64;
        for (w, l) in self.workers.iter().zip(&logits) {
            for i in 0..w.owned.len() {
                if !(w.val_mask[i] || w.test_mask[i]) {
                    continue;
                }
                let row = l.row(i);
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best as u32 == w.labels[i] {
                    if w.val_mask[i] {
                        val_correct += 1;
                    } else {
                        test_correct += 1;
                    }
                }
            }
        }
        let val_acc = if self.num_val > 0 {
            val_correct as f64 / self.num_val as f64
        } else {
            0.0
        };
        let test_acc = if self.num_test > 0 {
            test_correct as f64 / self.num_test as f64
        } else {
            0.0
        };
        Ok((val_acc, test_acc))
    }
}

/// Loopback TCP channels, one per ordered plan pair, carrying blocks in the
/// pinned wire format. A demonstration transport: masks, counts, and
/// message structure are identical to the in-memory channels; payload
/// values are quantized to f32 by the wire layout.
pub struct SocketTransport {
    channels: Vec<(TcpStream, TcpStream)>,
}

impl SocketTransport {
    pub fn connect(plan: &ExchangePlan) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let mut channels = Vec::with_capacity(plan.pairs.len());
        for _ in &plan.pairs {
            let writer = TcpStream::connect(addr)?;
            let (reader, _) = listener.accept()?;
            writer.set_nodelay(true)?;
            reader.set_nodelay(true)?;
            channels.push((writer, reader));
        }
        Ok(SocketTransport { channels })
    }

    /// Send a batch through the pair's socket and decode it on the other
    /// side. The writer runs on its own thread so batches larger than the
    /// kernel socket buffer cannot deadlock the exchange.
    fn transfer(
        &mut self,
        pair_idx: usize,
        blocks: Vec<CompressedBlock>,
    ) -> Result<Vec<CompressedBlock>> {
        let (writer, reader) = &mut self.channels[pair_idx];
        let mut buf = Vec::with_capacity(4 + blocks.len() * 32);
        buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for b in &blocks {
            buf.extend_from_slice(&b.encode_wire());
        }
        let mut write_half = writer.try_clone()?;
        let handle = std::thread::spawn(move || -> std::io::Result<()> {
            write_half.write_all(&buf)?;
            write_half.flush()
        });

        let mut count_buf = [0u8; 4];
        reader.read_exact(&mut count_buf)?;
        let count = u32::from_le_bytes(count_buf) as usize;
        let mut received = Vec::with_capacity(count);
        for _ in 0..count {
            let mut frame = vec![0u8; 24];
            reader.read_exact(&mut frame)?;
            let kept = u32::from_le_bytes(frame[20..24].try_into().unwrap()) as usize;
            frame.resize(24 + 4 * kept, 0);
            reader.read_exact(&mut frame[24..])?;
            let (block, _) = CompressedBlock::decode_wire(&frame)?;
            received.push(block);
        }
        handle
            .join()
            .map_err(|_| Error::Numeric("socket writer thread panicked".into()))??;
        Ok(received)
    }
}
