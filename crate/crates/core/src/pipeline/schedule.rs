//! Two-stage batch executor: stage A (load) feeds stage B (compute).
//!
//! Serialized runs A then B for each batch in turn. Overlapped runs A on a
//! producer thread and B on the caller's thread, joined by a handoff
//! channel, so loading batch i+1 proceeds while batch i computes.

use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// How the two stages are arranged in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Serialized,
    /// `handoff_depth` is the channel capacity between the stages; `None` is
    /// unbounded, `Some(0)` a rendezvous.
    Overlapped { handoff_depth: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimClock {
    /// Stage durations are bookkept on per-worker virtual clocks.
    #[default]
    Virtual,
    /// Each stage is padded with a sleep up to its configured duration.
    Sleep,
}

/// Configured per-batch stage durations that replace measured ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTimes {
    pub load_s: Vec<f64>,
    pub compute_s: Vec<f64>,
    #[serde(default)]
    pub clock: SimClock,
}

impl SimulatedTimes {
    pub fn new(load_s: Vec<f64>, compute_s: Vec<f64>, clock: SimClock) -> Self {
        Self { load_s, compute_s, clock }
    }

    pub fn validate(&self, n_batches: usize) -> Result<(), String> {
        if self.load_s.len() < n_batches || self.compute_s.len() < n_batches {
            return Err(format!(
                "simulated stage times cover {}/{} batches, need {n_batches}",
                self.load_s.len(),
                self.compute_s.len()
            ));
        }
        if self.load_s.iter().chain(&self.compute_s).any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err("simulated stage times must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Start/end of both stages of one batch, seconds since the run began.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageSpan {
    pub a_start: f64,
    pub a_end: f64,
    pub b_start: f64,
    pub b_end: f64,
}

#[derive(Debug)]
pub struct Execution<R> {
    pub results: Vec<R>,
    pub spans: Vec<StageSpan>,
    pub makespan_s: f64,
}

/// Closed-form makespan. Serialized: a_1 + b_1 + a_2 + ... accumulated in
/// that order, as one worker would. Overlapped: the
/// two-stage pipeline recurrence with stage A never blocked.
pub fn predict_makespan(a: &[f64], b: &[f64], overlapped: bool) -> Result<f64, String> {
    if a.len() != b.len() {
        return Err(format!("stage vectors differ in length ({} vs {})", a.len(), b.len()));
    }
    if a.iter().chain(b).any(|t| !(*t >= 0.0)) {
        return Err("stage times must be non-negative".into());
    }
    if !overlapped {
        return Ok(a.iter().zip(b).fold(0.0, |t, (x, y)| t + x + y));
    }
    let mut finish_a = 0.0f64;
    let mut finish_b = 0.0f64;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        finish_a += x;
        finish_b = if i == 0 { finish_a + y } else { finish_a.max(finish_b) + y };
    }
    Ok(finish_b)
}

enum Clock {
    Measured,
    Sleep,
    Virtual,
}

fn pad(started: Instant, target: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    if target > elapsed {
        thread::sleep(Duration::from_secs_f64(target - elapsed));
    }
}

/// Runs `n` batches through the two stages. Stage A runs on its own thread
/// when overlapped, so it must be `Send`. The first error from either stage
/// stops the run.
pub fn execute<P, R, E, A, B>(
    n: usize,
    schedule: Schedule,
    sim: Option<&SimulatedTimes>,
    mut stage_a: A,
    mut stage_b: B,
) -> Result<Execution<R>, E>
where
    P: Send,
    E: Send,
    A: FnMut(usize) -> Result<P, E> + Send,
    B: FnMut(usize, P) -> Result<R, E>,
{
    let clock = match sim.map(|s| s.clock) {
        None => Clock::Measured,
        Some(SimClock::Sleep) => Clock::Sleep,
        Some(SimClock::Virtual) => Clock::Virtual,
    };
    let a_time = |i: usize| sim.map_or(0.0, |s| s.load_s[i]);
    let b_time = |i: usize| sim.map_or(0.0, |s| s.compute_s[i]);
    let t0 = Instant::now();
    let since = |t: Instant| t.duration_since(t0).as_secs_f64();

    let mut results = Vec::with_capacity(n);
    let mut spans = vec![StageSpan::default(); n];

    match schedule {
        Schedule::Serialized => {
            let mut vclock = 0.0f64;
            for (i, span) in spans.iter_mut().enumerate() {
                let sa = Instant::now();
                let p = stage_a(i)?;
                if matches!(clock, Clock::Sleep) {
                    pad(sa, a_time(i));
                }
                let sb = Instant::now();
                let r = stage_b(i, p)?;
                if matches!(clock, Clock::Sleep) {
                    pad(sb, b_time(i));
                }
                *span = match clock {
                    Clock::Virtual => {
                        let a_end = vclock + a_time(i);
                        vclock = a_end + b_time(i);
                        StageSpan { a_start: a_end - a_time(i), a_end, b_start: a_end, b_end: vclock }
                    }
                    _ => StageSpan { a_start: since(sa), a_end: since(sb), b_start: since(sb), b_end: since(Instant::now()) },
                };
                results.push(r);
            }
        }
        Schedule::Overlapped { handoff_depth } => {
            let virtual_clock = matches!(clock, Clock::Virtual);
            let sleep_clock = matches!(clock, Clock::Sleep);
            // Virtual runs need a real channel that never blocks; queue
            // pressure is replayed from B's acknowledgements instead.
            let (tx, rx) = match (virtual_clock, handoff_depth) {
                (false, Some(d)) => {
                    let (tx, rx) = mpsc::sync_channel(d);
                    (Sender::Bounded(tx), rx)
                }
                _ => {
                    let (tx, rx) = mpsc::channel();
                    (Sender::Unbounded(tx), rx)
                }
            };
            let (ack_tx, ack_rx) = mpsc::channel::<f64>();

            thread::scope(|s| -> Result<(), E> {
                let producer = s.spawn(move || {
                    let mut vclock = 0.0f64;
                    for i in 0..n {
                        let sa = Instant::now();
                        let out = stage_a(i);
                        if sleep_clock {
                            pad(sa, a_time(i));
                        }
                        let failed = out.is_err();
                        let (a_start, a_end) = if virtual_clock {
                            (vclock, vclock + a_time(i))
                        } else {
                            (since(sa), since(Instant::now()))
                        };
                        if tx.send((i, out, a_start, a_end)).is_err() || failed {
                            return;
                        }
                        if virtual_clock {
                            vclock = a_end;
                            if let Some(d) = handoff_depth {
                                if i >= d {
                                    // item i was only accepted once B took item i - d
                                    match ack_rx.recv() {
                                        Ok(taken_at) => vclock = vclock.max(taken_at),
                                        Err(_) => return,
                                    }
                                }
                            }
                        }
                    }
                });

                let mut vclock = 0.0f64;
                let mut outcome = Ok(());
                for _ in 0..n {
                    let Ok((i, out, a_start, a_end)) = rx.recv() else { break };
                    let p = match out {
                        Ok(p) => p,
                        Err(e) => {
                            outcome = Err(e);
                            break;
                        }
                    };
                    let b_start_v = vclock.max(a_end);
                    if virtual_clock {
                        let _ = ack_tx.send(b_start_v);
                    }
                    let sb = Instant::now();
                    let r = match stage_b(i, p) {
                        Ok(r) => r,
                        Err(e) => {
                            outcome = Err(e);
                            break;
                        }
                    };
                    if sleep_clock {
                        pad(sb, b_time(i));
                    }
                    spans[i] = if virtual_clock {
                        vclock = b_start_v + b_time(i);
                        StageSpan { a_start, a_end, b_start: b_start_v, b_end: vclock }
                    } else {
                        StageSpan { a_start, a_end, b_start: since(sb), b_end: since(Instant::now()) }
                    };
                    results.push(r);
                }
                drop(rx);
                drop(ack_tx);
                producer.join().expect("stage A worker panicked");
                outcome
            })?;
        }
    }

    let makespan_s = match clock {
        Clock::Virtual => spans.iter().map(|s| s.b_end).fold(0.0, f64::max),
        _ => t0.elapsed().as_secs_f64(),
    };
    Ok(Execution { results, spans, makespan_s })
}

enum Sender<T> {
    Bounded(mpsc::SyncSender<T>),
    Unbounded(mpsc::Sender<T>),
}

impl<T> Sender<T> {
    fn send(&self, v: T) -> Result<(), ()> {
        match self {
            Sender::Bounded(s) => s.send(v).map_err(|_| ()),
            Sender::Unbounded(s) => s.send(v).map_err(|_| ()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let a = [2.0, 2.0, 2.0];
        let b = [3.0, 3.0, 3.0];
        assert_eq!(predict_makespan(&a, &b, false).unwrap(), 15.0);
        assert_eq!(predict_makespan(&a, &b, true).unwrap(), 11.0);
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(predict_makespan(&[1.0, 2.0, 3.0], &[0.0; 3], true).unwrap(), 6.0);
        assert_eq!(predict_makespan(&[1.5], &[2.5], true).unwrap(), 4.0);
        assert_eq!(predict_makespan(&[1.5], &[2.5], false).unwrap(), 4.0);
        assert_eq!(predict_makespan(&[], &[], true).unwrap(), 0.0);
        assert!(predict_makespan(&[1.0], &[1.0, 2.0], true).is_err());
        assert!(predict_makespan(&[-1.0], &[1.0], true).is_err());
    }

    fn run_virtual(a: &[f64], b: &[f64], schedule: Schedule) -> Execution<usize> {
        let sim = SimulatedTimes::new(a.to_vec(), b.to_vec(), SimClock::Virtual);
        execute::<usize, usize, (), _, _>(a.len(), schedule, Some(&sim), Ok, |i, p| {
            assert_eq!(i, p);
            Ok(i)
        })
        .unwrap()
    }

    #[test]
    fn virtual_executor_reproduces_hand_example() {
        let a = [2.0, 2.0, 2.0];
        let b = [3.0, 3.0, 3.0];
        assert_eq!(run_virtual(&a, &b, Schedule::Serialized).makespan_s, 15.0);
        let ex = run_virtual(&a, &b, Schedule::Overlapped { handoff_depth: None });
        assert_eq!(ex.makespan_s, 11.0);
        assert_eq!(ex.results, [0, 1, 2]);
        assert_eq!(ex.spans[1], StageSpan { a_start: 2.0, a_end: 4.0, b_start: 5.0, b_end: 8.0 });
    }

    #[test]
    fn bounded_handoff_can_stall_the_loader() {
        let a = [0.0, 0.0, 0.0, 11.0];
        let b = [5.0, 5.0, 5.0, 1.0];
        assert_eq!(predict_makespan(&a, &b, true).unwrap(), 16.0);
        assert_eq!(run_virtual(&a, &b, Schedule::Overlapped { handoff_depth: None }).makespan_s, 16.0);
        assert_eq!(run_virtual(&a, &b, Schedule::Overlapped { handoff_depth: Some(1) }).makespan_s, 17.0);
    }

    #[test]
    fn errors_propagate_from_either_stage() {
        for schedule in [Schedule::Serialized, Schedule::Overlapped { handoff_depth: Some(1) }] {
            let r = execute::<usize, usize, String, _, _>(5, schedule, None, |i| if i == 2 { Err("a".into()) } else { Ok(i) }, |_, p| Ok(p));
            assert_eq!(r.unwrap_err(), "a");
            let r = execute::<usize, usize, String, _, _>(5, schedule, None, Ok, |i, p| if i == 3 { Err("b".into()) } else { Ok(p) });
            assert_eq!(r.unwrap_err(), "b");
        }
    }

    #[test]
    fn sleep_clock_overlaps_in_real_time() {
        let sim = SimulatedTimes::new(vec![0.03; 6], vec![0.03; 6], SimClock::Sleep);
        let ser = execute::<(), (), (), _, _>(6, Schedule::Serialized, Some(&sim), |_| Ok(()), |_, _| Ok(())).unwrap();
        let ovl = execute::<(), (), (), _, _>(6, Schedule::Overlapped { handoff_depth: None }, Some(&sim), |_| Ok(()), |_, _| Ok(()))
            .unwrap();
        assert!(ser.makespan_s >= 0.36);
        assert!(ovl.makespan_s < ser.makespan_s * 0.8, "{} vs {}", ovl.makespan_s, ser.makespan_s);
    }
}
