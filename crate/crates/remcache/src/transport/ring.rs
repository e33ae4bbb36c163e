//! Bounded single-producer single-consumer ring buffer.
//!
//! The producer and consumer each complete in a bounded number of steps
//! without blocking the other: `push` and `pop` touch one atomic index of
//! the peer side (Acquire) and publish their own with Release. FIFO order is
//! preserved and no element is lost or duplicated.
//!
//! Indices run modulo `2 * capacity` so an empty ring (`read == write`) is
//! distinguishable from a full one (`write - read == capacity`) without a
//! sacrificial slot.

use std::cell::UnsafeCell;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

struct RingInner<T> {
    slots: Box<[UnsafeCell<MaybeUninit<T>>]>,
    capacity: usize,
    read: AtomicUsize,
    write: AtomicUsize,
}

unsafe impl<T: Send> Sync for RingInner<T> {}
unsafe impl<T: Send> Send for RingInner<T> {}

/// SPSC FIFO ring; split into a producer and consumer handle.
pub struct RingBuffer;

impl RingBuffer {
    pub fn with_capacity<T>(capacity: usize) -> (Producer<T>, Consumer<T>) {
        assert!(capacity >= 1, "ring capacity must be >= 1");
        let slots = (0..capacity)
            .map(|_| UnsafeCell::new(MaybeUninit::uninit()))
            .collect::<Vec<_>>()
            .into_boxed_slice();
        let inner = Arc::new(RingInner {
            slots,
            capacity,
            read: AtomicUsize::new(0),
            write: AtomicUsize::new(0),
        });
        (
            Producer {
                inner: Arc::clone(&inner),
            },
            Consumer { inner },
        )
    }
}

pub struct Producer<T> {
    inner: Arc<RingInner<T>>,
}

pub struct Consumer<T> {
    inner: Arc<RingInner<T>>,
}

impl<T> Producer<T> {
    /// Enqueues an element, or returns it when the ring is full.
    pub fn push(&mut self, value: T) -> Result<(), T> {
        let inner = &*self.inner;
        let write = inner.write.load(Ordering::Relaxed);
        let read = inner.read.load(Ordering::Acquire);
        let used = write.wrapping_sub(read) % (2 * inner.capacity);
        if used == inner.capacity {
            return Err(value);
        }
        let slot = write % inner.capacity;
        unsafe {
            (*inner.slots[slot].get()).write(value);
        }
        inner
            .write
            .store(write.wrapping_add(1) % (2 * inner.capacity), Ordering::Release);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        let inner = &*self.inner;
        let write = inner.write.load(Ordering::Relaxed);
        let read = inner.read.load(Ordering::Acquire);
        write.wrapping_sub(read) % (2 * inner.capacity) == inner.capacity
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity
    }
}

impl<T> Consumer<T> {
    /// Dequeues the oldest element, if any.
    pub fn pop(&mut self) -> Option<T> {
        let inner = &*self.inner;
        let read = inner.read.load(Ordering::Relaxed);
        let write = inner.write.load(Ordering::Acquire);
        if read == write {
            return None;
        }
        let slot = read % inner.capacity;
        let value = unsafe { (*inner.slots[slot].get()).assume_init_read() };
        inner
            .read
            .store(read.wrapping_add(1) % (2 * inner.capacity), Ordering::Release);
        Some(value)
    }

    pub fn is_empty(&self) -> bool {
        let inner = &*self.inner;
        inner.read.load(Ordering::Relaxed) == inner.write.load(Ordering::Acquire)
    }

    pub fn len(&self) -> usize {
        let inner = &*self.inner;
        let read = inner.read.load(Ordering::Relaxed);
        let write = inner.write.load(Ordering::Acquire);
        write.wrapping_sub(read) % (2 * inner.capacity)
    }
}

impl<T> Drop for Consumer<T> {
    fn drop(&mut self) {
        // Drain remaining initialized elements; the producer side holds no T.
        while self.pop().is_some() {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn fifo_within_capacity() {
        let (mut p, mut c) = RingBuffer::with_capacity::<u32>(2);
        p.push(0).unwrap();
        p.push(1).unwrap();
        assert_eq!(p.push(2), Err(2));
        assert_eq!(c.pop(), Some(0));
        p.push(2).unwrap();
        assert_eq!(c.pop(), Some(1));
        assert_eq!(c.pop(), Some(2));
        assert_eq!(c.pop(), None);
    }

    #[test]
    fn cross_thread_order_preserved() {
        let (mut p, mut c) = RingBuffer::with_capacity::<u64>(64);
        let n = 100_000u64;
        let producer = thread::spawn(move || {
            for i in 0..n {
                let mut v = i;
                loop {
                    match p.push(v) {
                        Ok(()) => break,
                        Err(back) => {
                            v = back;
                            std::hint::spin_loop();
                        }
                    }
                }
            }
        });
        let mut expected = 0u64;
        while expected < n {
            if let Some(v) = c.pop() {
                assert_eq!(v, expected);
                expected += 1;
            } else {
                std::hint::spin_loop();
            }
        }
        producer.join().unwrap();
    }

    #[test]
    fn drops_leftover_elements() {
        let counter = Arc::new(AtomicUsize::new(0));
        struct D(Arc<AtomicUsize>);
        impl Drop for D {
            fn drop(&mut self) {
                self.0.fetch_add(1, Ordering::SeqCst);
            }
        }
        let (mut p, c) = RingBuffer::with_capacity::<D>(4);
        assert!(p.push(D(Arc::clone(&counter))).is_ok());
        assert!(p.push(D(Arc::clone(&counter))).is_ok());
        drop(c);
        drop(p);
        assert_eq!(counter.load(Ordering::SeqCst), 2);
    }
}
