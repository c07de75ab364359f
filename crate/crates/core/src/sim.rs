//! Single-threaded discrete-event executor over virtual time.
//!
//! Tasks are futures whose only suspension points are [`SimHandle::sleep_until`].
//! The executor repeatedly pops the earliest timer `(time, seq)`, runs the
//! advance hook for that time (used to produce ledger blocks before any task
//! observes the new time), then polls the owning task. Ties are broken by
//! timer registration order, so a run is a pure function of its inputs.

use std::cell::{Cell, RefCell};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use crate::ledger::VirtualTime;

type TaskId = usize;

#[derive(Default)]
struct Timers {
    heap: BinaryHeap<Reverse<(VirtualTime, u64, TaskId)>>,
    seq: u64,
}

struct Shared {
    now: Cell<VirtualTime>,
    current: Cell<Option<TaskId>>,
    timers: RefCell<Timers>,
}

/// Cheap handle given to tasks for reading the clock and sleeping.
#[derive(Clone)]
pub struct SimHandle {
    shared: Rc<Shared>,
}

impl SimHandle {
    pub fn new(start: VirtualTime) -> Self {
        Self {
            shared: Rc::new(Shared {
                now: Cell::new(start),
                current: Cell::new(None),
                timers: RefCell::new(Timers::default()),
            }),
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.shared.now.get()
    }

    pub fn sleep_until(&self, deadline: VirtualTime) -> Sleep {
        Sleep {
            handle: self.clone(),
            deadline,
            registered: false,
        }
    }

    pub fn sleep(&self, ms: u64) -> Sleep {
        self.sleep_until(self.now() + ms)
    }
}

pub struct Sleep {
    handle: SimHandle,
    deadline: VirtualTime,
    registered: bool,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        // A task is only polled when its own timer fires, so a registered
        // sleep is due. Zero-length sleeps still yield once so that tasks
        // scheduled for the same time interleave in registration order.
        if self.registered {
            return Poll::Ready(());
        }
        let shared = &self.handle.shared;
        let task = shared
            .current
            .get()
            .expect("Sleep polled outside the simulation executor");
        let deadline = self.deadline.max(shared.now.get());
        let mut timers = shared.timers.borrow_mut();
        let seq = timers.seq;
        timers.seq += 1;
        timers.heap.push(Reverse((deadline, seq, task)));
        drop(timers);
        self.registered = true;
        Poll::Pending
    }
}

type Task<'a> = Pin<Box<dyn Future<Output = ()> + 'a>>;

/// The executor. `'a` lets tasks borrow from the caller's stack.
pub struct Executor<'a> {
    handle: SimHandle,
    tasks: Vec<Option<Task<'a>>>,
    on_advance: Option<Box<dyn FnMut(VirtualTime) + 'a>>,
}

impl<'a> Executor<'a> {
    pub fn new(start: VirtualTime) -> Self {
        Self::with_handle(SimHandle::new(start))
    }

    /// Drives tasks that share a pre-made handle, so state that the handle is
    /// given to can outlive the executor.
    pub fn with_handle(handle: SimHandle) -> Self {
        Self {
            handle,
            tasks: Vec::new(),
            on_advance: None,
        }
    }

    pub fn handle(&self) -> SimHandle {
        self.handle.clone()
    }

    /// Called with each new time before any task is polled at that time.
    pub fn on_advance(&mut self, hook: impl FnMut(VirtualTime) + 'a) {
        self.on_advance = Some(Box::new(hook));
    }

    /// Tasks first run, in spawn order, at the executor's start time.
    pub fn spawn(&mut self, fut: impl Future<Output = ()> + 'a) {
        let id = self.tasks.len();
        self.tasks.push(Some(Box::pin(fut)));
        let shared = &self.handle.shared;
        let mut timers = shared.timers.borrow_mut();
        let seq = timers.seq;
        timers.seq += 1;
        timers.heap.push(Reverse((shared.now.get(), seq, id)));
    }

    /// Runs until every task has completed. Returns the final time.
    pub fn run(mut self) -> VirtualTime {
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        loop {
            let next = self.handle.shared.timers.borrow_mut().heap.pop();
            let Some(Reverse((time, _, id))) = next else {
                break;
            };
            let shared = &self.handle.shared;
            shared.now.set(time);
            if let Some(hook) = self.on_advance.as_mut() {
                hook(time);
            }
            let Some(task) = self.tasks[id].as_mut() else {
                continue;
            };
            shared.current.set(Some(id));
            let done = task.as_mut().poll(&mut cx).is_ready();
            shared.current.set(None);
            if done {
                self.tasks[id] = None;
            }
        }
        assert!(
            self.tasks.iter().all(Option::is_none),
            "simulation stalled with tasks blocked on nothing"
        );
        self.handle.now()
    }
}

/// Drives a future whose awaits all resolve immediately (no virtual time).
pub fn block_on_ready<F: Future>(fut: F) -> F::Output {
    let mut fut = std::pin::pin!(fut);
    let mut cx = Context::from_waker(Waker::noop());
    match fut.as_mut().poll(&mut cx) {
        Poll::Ready(v) => v,
        Poll::Pending => panic!("future suspended outside the simulation executor"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tasks_interleave_in_time_order() {
        let log = RefCell::new(Vec::new());
        let mut ex = Executor::new(VirtualTime(0));
        for (name, delays) in [("a", vec![5, 5]), ("b", vec![3, 10]), ("c", vec![0, 7])] {
            let h = ex.handle();
            let log = &log;
            ex.spawn(async move {
                for d in delays {
                    h.sleep(d).await;
                    log.borrow_mut().push((h.now().millis(), name));
                }
            });
        }
        let end = ex.run();
        assert_eq!(end, VirtualTime(13));
        assert_eq!(
            log.into_inner(),
            vec![(0, "c"), (3, "b"), (5, "a"), (7, "c"), (10, "a"), (13, "b")]
        );
    }

    #[test]
    fn advance_hook_sees_every_time_before_tasks() {
        let seen = RefCell::new(Vec::new());
        let mut ex = Executor::new(VirtualTime(0));
        let h = ex.handle();
        let seen_ref = &seen;
        ex.on_advance(move |t| seen_ref.borrow_mut().push(t.millis()));
        ex.spawn(async move {
            h.sleep(4).await;
            h.sleep_until(VirtualTime(2)).await;
        });
        ex.run();
        assert_eq!(seen.into_inner(), vec![0, 4, 4]);
    }

    #[test]
    fn same_time_ties_follow_registration_order() {
        let log = RefCell::new(Vec::new());
        let mut ex = Executor::new(VirtualTime(0));
        for i in 0..4 {
            let h = ex.handle();
            let log = &log;
            ex.spawn(async move {
                h.sleep_until(VirtualTime(100)).await;
                log.borrow_mut().push(i);
            });
        }
        ex.run();
        assert_eq!(log.into_inner(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn block_on_ready_runs_immediate_futures() {
        assert_eq!(block_on_ready(async { 7 }), 7);
    }
}
