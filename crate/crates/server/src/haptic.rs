//! The haptic loop: a dedicated thread ticking the session at a fixed rate
//! with drift-corrected deadlines.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, TryRecvError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use kinestat_core::fivebar::WorkingMode;
use kinestat_core::protocol::{ParamsPatch, PointerSample, ServerMessage, StateSnapshot};
use kinestat_core::session::Session;
use tokio::sync::{broadcast, oneshot, watch};

/// Slots the loop may fall behind before it gives up on catching up.
const MAX_BACKLOG: u32 = 8;
const STATS_WINDOW: usize = 4096;

pub(crate) enum Command {
    Pointer(PointerSample),
    Params(ParamsPatch, oneshot::Sender<Result<WorkingMode, String>>),
    ReleasePointer,
}

/// Durations of recent ticks.
#[derive(Debug, Default)]
pub(crate) struct TickStats {
    pub ticks: u64,
    pub skipped_slots: u64,
    pub max_us: f64,
    recent: VecDeque<f64>,
}

impl TickStats {
    fn record(&mut self, us: f64) {
        self.ticks += 1;
        self.max_us = self.max_us.max(us);
        if self.recent.len() == STATS_WINDOW {
            self.recent.pop_front();
        }
        self.recent.push_back(us);
    }

    /// (p50, p99) over the recent window.
    pub fn percentiles(&self) -> (f64, f64) {
        if self.recent.is_empty() {
            return (0.0, 0.0);
        }
        let mut v: Vec<f64> = self.recent.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        (at(0.5), at(0.99))
    }
}

pub(crate) struct HapticLoop {
    pub session: Session,
    pub commands: Receiver<Command>,
    pub snapshots: watch::Sender<Option<Arc<StateSnapshot>>>,
    pub outbound: broadcast::Sender<Arc<str>>,
    pub stats: Arc<Mutex<TickStats>>,
    pub stop: Arc<AtomicBool>,
    pub decimation: u32,
}

impl HapticLoop {
    fn apply(&mut self, cmd: Command) {
        match cmd {
            // Sequence checks happen per connection.
            Command::Pointer(p) => {
                let _ = self.session.offer_pointer(p);
            }
            Command::Params(patch, reply) => {
                let res = self
                    .session
                    .set_params(&patch)
                    .map(|_| self.session.config().params.mode)
                    .map_err(|e| e.to_string());
                let _ = reply.send(res);
            }
            Command::ReleasePointer => self.session.release_pointer(),
        }
    }

    pub fn run(mut self) {
        let period = Duration::from_nanos(self.session.config().rates.haptic_period_ns());
        let start = Instant::now();
        let mut slot: u32 = 0;
        let mut base = start;
        while !self.stop.load(Ordering::Relaxed) {
            loop {
                match self.commands.try_recv() {
                    Ok(cmd) => self.apply(cmd),
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return,
                }
            }
            let nominal = (base + period * slot).duration_since(start);
            let t0 = Instant::now();
            let snap = self.session.tick(nominal.as_nanos() as u64);
            let us = t0.elapsed().as_secs_f64() * 1e6;
            self.stats.lock().unwrap().record(us);
            if snap.tick.is_multiple_of(u64::from(self.decimation)) {
                let msg = ServerMessage::Force {
                    tick: snap.tick,
                    f: snap.force.f,
                    clamped: snap.force.clamped,
                };
                let _ = self.outbound.send(msg.to_json().into());
            }
            self.snapshots.send_replace(Some(Arc::new(snap)));

            slot += 1;
            let mut deadline = base + period * slot;
            let now = Instant::now();
            if now > deadline + period * MAX_BACKLOG {
                let behind = ((now - deadline).as_nanos() / period.as_nanos()) as u64;
                self.stats.lock().unwrap().skipped_slots += behind;
                base = now;
                slot = 0;
                deadline = now;
            }
            if slot == u32::MAX {
                base = deadline;
                slot = 0;
            }
            if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }
}
