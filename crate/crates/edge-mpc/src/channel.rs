//! Delay-injecting message channel and the per-command delay ledger.
//!
//! A channel stamps every sent payload with a scheduled delivery time
//! `t_sent + delay`, where the delay is drawn from a seeded model. Polling
//! releases exactly the messages whose delivery time has passed, in delivery
//! order, so messages may overtake each other when a small delay follows a
//! large one.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard normal quantile at 0.9999; the truncated-lognormal fit places
/// this quantile at the model's maximum delay.
const Z_9999: f64 = 3.719016485455709;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayKind {
    Constant,
    Uniform,
    TruncatedLognormal,
}

/// Delay distribution: constant at `mean`, uniform on `[0, 2*mean]`, or a
/// lognormal with the requested mean whose 0.9999 quantile sits at `max`,
/// clamped to `max`. All samples land in `[0, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayModel {
    pub kind: DelayKind,
    /// Mean delay, s.
    pub mean: f64,
    /// Hard upper bound on any sample, s.
    pub max: f64,
    /// Seed for the channel's random stream.
    pub seed: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self::zero()
    }
}

impl DelayModel {
    /// No delay at all.
    pub fn zero() -> Self {
        Self {
            kind: DelayKind::Constant,
            mean: 0.0,
            max: 0.0,
            seed: 0,
        }
    }

    pub fn constant(mean: f64) -> Self {
        Self {
            kind: DelayKind::Constant,
            mean,
            max: mean,
            seed: 0,
        }
    }

    pub fn truncated_lognormal(mean: f64, max: f64, seed: u64) -> Self {
        Self {
            kind: DelayKind::TruncatedLognormal,
            mean,
            max,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean.is_finite() && self.max.is_finite()) {
            return Err(Error::invalid("delay model: mean and max must be finite"));
        }
        if self.mean < 0.0 || self.mean > self.max {
            return Err(Error::invalid(
                "delay model: need 0 <= mean <= max",
            ));
        }
        match self.kind {
            DelayKind::Constant => Ok(()),
            DelayKind::Uniform => {
                if 2.0 * self.mean > self.max {
                    return Err(Error::invalid(
                        "uniform delay model: need 2*mean <= max to keep the mean",
                    ));
                }
                Ok(())
            }
            DelayKind::TruncatedLognormal => {
                if self.mean == 0.0 {
                    return Err(Error::invalid(
                        "lognormal delay model: mean must be > 0",
                    ));
                }
                let ratio = self.max / self.mean;
                if 2.0 * ratio.ln() > Z_9999 * Z_9999 {
                    return Err(Error::invalid(
                        "lognormal delay model: max/mean too large for the quantile fit",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Lognormal parameters `(mu, sigma)` solving `E[X] = mean` and
    /// `q_{0.9999}(X) = max`.
    fn lognormal_params(&self) -> (f64, f64) {
        let sigma = Z_9999 - (Z_9999 * Z_9999 - 2.0 * (self.max / self.mean).ln()).sqrt();
        let mu = self.mean.ln() - sigma * sigma / 2.0;
        (mu, sigma)
    }
}

/// Draw one delay. Deterministic for a fixed seed and draw index; always in
/// `[0, model.max]`.
pub fn sample_delay(model: &DelayModel, rng: &mut impl Rng) -> f64 {
    let raw = match model.kind {
        DelayKind::Constant => model.mean,
        DelayKind::Uniform => {
            if model.mean == 0.0 {
                0.0
            } else {
                rng.gen_range(0.0..2.0 * model.mean)
            }
        }
        DelayKind::TruncatedLognormal => {
            let (mu, sigma) = model.lognormal_params();
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            (mu + sigma * z).exp()
        }
    };
    let sample = raw.clamp(0.0, model.max);
    debug_assert!(sample.is_finite());
    sample
}

/// A payload in flight, stamped with its schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMessage<P> {
    pub seq: u64,
    pub payload: P,
    /// Sender clock at send time, s.
    pub t_sent: f64,
    /// Scheduled delivery time: `t_sent + delay_applied`.
    pub t_deliver: f64,
    pub delay_applied: f64,
}

struct Pending<P> {
    msg: ChannelMessage<P>,
}

impl<P> PartialEq for Pending<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<P> Eq for Pending<P> {}
impl<P> PartialOrd for Pending<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Pending<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap through Reverse: order by delivery time, ties by seq.
        self.msg
            .t_deliver
            .total_cmp(&other.msg.t_deliver)
            .then(self.msg.seq.cmp(&other.msg.seq))
    }
}

struct ChannelInner<P> {
    model: DelayModel,
    rng: ChaCha8Rng,
    queue: BinaryHeap<std::cmp::Reverse<Pending<P>>>,
    next_seq: u64,
    closed: bool,
}

/// Thread-safe delay queue: any number of senders, one poller.
pub struct DelayChannel<P> {
    inner: Mutex<ChannelInner<P>>,
}

impl<P> DelayChannel<P> {
    pub fn new(model: DelayModel) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            inner: Mutex::new(ChannelInner {
                rng: ChaCha8Rng::seed_from_u64(model.seed),
                model,
                queue: BinaryHeap::new(),
                next_seq: 0,
                closed: false,
            }),
        })
    }

    /// Enqueue a payload at sender time `t_now`; returns its sequence number.
    pub fn send(&self, payload: P, t_now: f64) -> Result<u64> {
        self.send_timed(payload, t_now).map(|(seq, _)| seq)
    }

    /// [`Self::send`], additionally returning the delay drawn for the
    /// message.
    pub fn send_timed(&self, payload: P, t_now: f64) -> Result<(u64, f64)> {
        if !t_now.is_finite() {
            return Err(Error::invalid("send: non-finite time"));
        }
        let mut inner = self.inner.lock().unwrap();
        if inner.closed {
            return Err(Error::ChannelClosed);
        }
        let model = inner.model;
        let delay = sample_delay(&model, &mut inner.rng);
        assert!(
            (0.0..=inner.model.max).contains(&delay),
            "delay sample {delay} escaped [0, {}]",
            inner.model.max
        );
        let seq = inner.next_seq;
        inner.next_seq += 1;
        inner.queue.push(std::cmp::Reverse(Pending {
            msg: ChannelMessage {
                seq,
                payload,
                t_sent: t_now,
                t_deliver: t_now + delay,
                delay_applied: delay,
            },
        }));
        Ok((seq, delay))
    }

    /// Release every message whose delivery time has passed, ordered by
    /// delivery time then sequence number. Each message is delivered once.
    pub fn poll(&self, t_now: f64) -> Vec<ChannelMessage<P>> {
        let mut inner = self.inner.lock().unwrap();
        let mut out = Vec::new();
        while let Some(std::cmp::Reverse(head)) = inner.queue.peek() {
            if head.msg.t_deliver <= t_now {
                let std::cmp::Reverse(p) = inner.queue.pop().unwrap();
                out.push(p.msg);
            } else {
                break;
            }
        }
        out
    }

    /// Stop accepting sends. Pending messages can still be polled out.
    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }
}

/// One completed command's delay decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    /// Command sequence number (echoes the state it answered).
    pub seq: u64,
    /// State uplink delay, s.
    pub d1: f64,
    /// Controller execution time, s.
    pub exec: f64,
    /// Command downlink delay, s.
    pub downlink: f64,
    /// `d1 + exec`.
    pub d2: f64,
    /// `d2 + downlink`.
    pub d3: f64,
}

/// Append-only log of delay decompositions, one row per command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DelayLedger {
    rows: Vec<LedgerRow>,
}

impl DelayLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a command's delay chain; `d2` and `d3` are derived.
    pub fn record(&mut self, seq: u64, d1: f64, exec: f64, downlink: f64) -> Result<LedgerRow> {
        for (name, v) in [("d1", d1), ("exec", exec), ("downlink", downlink)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "ledger_record: {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        let d2 = d1 + exec;
        let d3 = d2 + downlink;
        let row = LedgerRow {
            seq,
            d1,
            exec,
            downlink,
            d2,
            d3,
        };
        self.rows.push(row);
        Ok(row)
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_zero_model_never_delays() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DelayModel::zero();
        for _ in 0..100 {
            assert_eq!(sample_delay(&model, &mut rng), 0.0);
        }
    }

    fn empirical_mean(model: &DelayModel, n: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        let mut sum = 0.0;
        for _ in 0..n {
            let d = sample_delay(model, &mut rng);
            assert!((0.0..=model.max).contains(&d));
            sum += d;
        }
        sum / n as f64
    }

    #[test]
    fn lognormal_uplink_figures() {
        // Mean 0.0089 s, max 0.1700 s.
        let model = DelayModel::truncated_lognormal(0.0089, 0.17, 7);
        model.validate().unwrap();
        let mean = empirical_mean(&model, 100_000);
        assert!(
            (mean - 0.0089).abs() <= 0.05 * 0.0089,
            "empirical mean {mean}"
        );
    }

    #[test]
    fn lognormal_downlink_figures() {
        // Mean 0.0161 s, max 0.2600 s.
        let model = DelayModel::truncated_lognormal(0.0161, 0.26, 8);
        model.validate().unwrap();
        let mean = empirical_mean(&model, 100_000);
        assert!(
            (mean - 0.0161).abs() <= 0.05 * 0.0161,
            "empirical mean {mean}"
        );
    }

    #[test]
    fn uniform_mean_convergence() {
        let model = DelayModel {
            kind: DelayKind::Uniform,
            mean: 0.01,
            max: 0.05,
            seed: 3,
        };
        model.validate().unwrap();
        let mean = empirical_mean(&model, 100_000);
        assert!((mean - 0.01).abs() <= 0.05 * 0.01, "empirical mean {mean}");
    }

    #[test]
    fn model_validation() {
        assert!(DelayModel::zero().validate().is_ok());
        assert!(DelayModel::constant(0.01).validate().is_ok());
        let mut m = DelayModel::constant(0.01);
        m.max = 0.005;
        assert!(m.validate().is_err(), "mean > max");
        let m = DelayModel {
            kind: DelayKind::Uniform,
            mean: 0.04,
            max: 0.05,
            seed: 0,
        };
        assert!(m.validate().is_err(), "uniform needs 2*mean <= max");
        let m = DelayModel::truncated_lognormal(1e-6, 10.0, 0);
        assert!(m.validate().is_err(), "quantile fit impossible");
        let m = DelayModel::truncated_lognormal(0.0, 0.1, 0);
        assert!(m.validate().is_err(), "lognormal mean 0");
    }

    #[test]
    fn zero_delay_messages_arrive_immediately() {
        let ch = DelayChannel::new(DelayModel::zero()).unwrap();
        ch.send("hi", 1.0).unwrap();
        let got = ch.poll(1.0);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].payload, "hi");
        assert_eq!(got[0].delay_applied, 0.0);
        assert_eq!(got[0].t_deliver, 1.0);
    }

    #[test]
    fn send_after_close_rejected() {
        let ch = DelayChannel::new(DelayModel::zero()).unwrap();
        ch.send(1u32, 0.0).unwrap();
        ch.close();
        match ch.send(2u32, 0.0) {
            Err(Error::ChannelClosed) => {}
            other => panic!("expected ChannelClosed, got {other:?}"),
        }
        // Draining still works.
        assert_eq!(ch.poll(0.0).len(), 1);
    }

    #[test]
    fn messages_can_reorder() {
        // Find a seed whose first two uniform draws are descending, then the
        // second message overtakes the first.
        let mut seed = 0u64;
        loop {
            let model = DelayModel {
                kind: DelayKind::Uniform,
                mean: 0.02,
                max: 0.04,
                seed,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d0 = sample_delay(&model, &mut rng);
            let d1 = sample_delay(&model, &mut rng);
            if d0 > d1 + 1e-6 {
                let ch = DelayChannel::new(model).unwrap();
                let s0 = ch.send(0u32, 0.0).unwrap();
                let s1 = ch.send(1u32, 0.0).unwrap();
                let got = ch.poll(1.0);
                assert_eq!(got.len(), 2);
                assert_eq!(got[0].seq, s1, "later send must arrive first");
                assert_eq!(got[1].seq, s0);
                return;
            }
            seed += 1;
            assert!(seed < 1000, "no reordering seed found");
        }
    }

    #[test]
    fn poll_is_exactly_once_and_complete() {
        let model = DelayModel {
            kind: DelayKind::Uniform,
            mean: 0.02,
            max: 0.05,
            seed: 11,
        };
        let ch = DelayChannel::new(model).unwrap();
        let mut sent = Vec::new();
        for k in 0..100u32 {
            let t = k as f64 * 0.01;
            sent.push(ch.send(k, t).unwrap());
        }
        // Nothing deliverable before the first send.
        assert!(DelayChannel::<u32>::new(model).unwrap().poll(-1.0).is_empty());

        let mut delivered = Vec::new();
        let mut t = 0.0;
        while t < 2.0 {
            let batch = ch.poll(t);
            // Repolling at the same instant returns nothing new.
            assert!(ch.poll(t).is_empty());
            for m in &batch {
                assert!(m.t_deliver <= t);
                assert_eq!(m.t_deliver, m.t_sent + m.delay_applied);
            }
            delivered.extend(batch.into_iter().map(|m| m.seq));
            t += 0.013;
        }
        let mut sorted = delivered.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), delivered.len(), "duplicate delivery");
        assert_eq!(sorted, sent, "lost messages");
    }

    #[test]
    fn identical_seeds_give_identical_schedules() {
        let model = DelayModel::truncated_lognormal(0.0089, 0.17, 42);
        let a = DelayChannel::new(model).unwrap();
        let b = DelayChannel::new(model).unwrap();
        for k in 0..200u32 {
            let t = k as f64 * 0.02;
            a.send(k, t).unwrap();
            b.send(k, t).unwrap();
        }
        let da = a.poll(100.0);
        let db = b.poll(100.0);
        assert_eq!(da.len(), db.len());
        for (x, y) in da.iter().zip(&db) {
            assert_eq!(x.seq, y.seq);
            assert_eq!(x.t_deliver, y.t_deliver);
            assert_eq!(x.delay_applied, y.delay_applied);
        }
    }

    #[test]
    fn ledger_composes_paper_average_chain() {
        let mut ledger = DelayLedger::new();
        let row = ledger.record(0, 0.0089, 0.0141, 0.0161).unwrap();
        assert!((row.d2 - 0.0230).abs() < 1e-12);
        assert!((row.d3 - 0.0391).abs() < 1e-12);
    }

    #[test]
    fn ledger_zero_chain() {
        let mut ledger = DelayLedger::new();
        let row = ledger.record(0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(row.d2, 0.0);
        assert_eq!(row.d3, 0.0);
    }

    #[test]
    fn ledger_rejects_negative_components() {
        let mut ledger = DelayLedger::new();
        assert!(ledger.record(0, -0.001, 0.0, 0.0).is_err());
        assert!(ledger.record(0, 0.0, -1.0, 0.0).is_err());
        assert!(ledger.record(0, 0.0, 0.0, f64::NAN).is_err());
        assert!(ledger.rows().is_empty());
    }

    #[test]
    fn ledger_rows_are_ordered_chains() {
        let mut ledger = DelayLedger::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..1000 {
            let d1 = rng.gen_range(0.0..0.1);
            let exec = rng.gen_range(0.0..0.05);
            let dl = rng.gen_range(0.0..0.1);
            ledger.record(k, d1, exec, dl).unwrap();
        }
        for row in ledger.rows() {
            assert!(row.d1 <= row.d2 && row.d2 <= row.d3);
        }
    }
}
