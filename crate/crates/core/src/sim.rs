//! Network and compute heterogeneity simulators.
//!
//! [`ShapedStream`] limits a stream to a configured bandwidth with a token
//! bucket holding 0.1 s worth of bytes, and can add a fixed latency per
//! message. [`ThrottledClient`] stretches each `fit` call by sleeping
//! `(slowdown - 1)` times its measured duration afterwards.

use std::io::{self, Read, Write};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::client::{Client, ClientError, EvaluateOutput, FitOutput};
use crate::protocol::ConfigMap;
use crate::tensor::Weights;
use crate::transport::{Closer, Dialer, Stream, TransportError};

/// Seconds of traffic the bucket can hold.
pub const BUCKET_PERIOD_S: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("latency must be non-negative and finite, got {0}")]
    Latency(f64),
    #[error("slowdown must be at least 1, got {0}")]
    Slowdown(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkProfile {
    /// Bits per second; `f64::INFINITY` means unshaped.
    pub bandwidth_bps: f64,
    pub latency_s: f64,
}

impl LinkProfile {
    pub fn new(bandwidth_bps: f64) -> Result<Self, ProfileError> {
        Self::with_latency(bandwidth_bps, 0.0)
    }

    pub fn with_latency(bandwidth_bps: f64, latency_s: f64) -> Result<Self, ProfileError> {
        if bandwidth_bps.is_nan() || bandwidth_bps <= 0.0 {
            return Err(ProfileError::Bandwidth(bandwidth_bps));
        }
        if !(latency_s >= 0.0 && latency_s.is_finite()) {
            return Err(ProfileError::Latency(latency_s));
        }
        Ok(Self {
            bandwidth_bps,
            latency_s,
        })
    }

    pub fn unlimited() -> Self {
        Self {
            bandwidth_bps: f64::INFINITY,
            latency_s: 0.0,
        }
    }

    pub fn is_unlimited(&self) -> bool {
        self.bandwidth_bps.is_infinite() && self.latency_s == 0.0
    }

    /// Ideal time to move `bytes` over this link, ignoring latency.
    pub fn transfer_time(&self, bytes: u64) -> Duration {
        if self.bandwidth_bps.is_infinite() {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(bytes as f64 * 8.0 / self.bandwidth_bps)
        }
    }
}

/// Byte-credit rate limiter. Starts empty so the first transfer cannot ride
/// on a burst.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(bandwidth_bps: f64) -> Self {
        let rate = bandwidth_bps / 8.0;
        Self {
            rate,
            capacity: (rate * BUCKET_PERIOD_S).max(1.0),
            tokens: 0.0,
            last: Instant::now(),
        }
    }

    /// Largest chunk worth requesting at once.
    pub fn capacity(&self) -> usize {
        self.capacity as usize
    }

    fn refill(&mut self, now: Instant) {
        if now > self.last {
            let earned = (now - self.last).as_secs_f64() * self.rate;
            self.tokens = (self.tokens + earned).min(self.capacity);
            self.last = now;
        }
    }

    /// Takes `n` bytes of credit; returns how long the caller must wait
    /// before sending them.
    pub fn acquire(&mut self, n: usize) -> Duration {
        self.refill(Instant::now());
        let n = n as f64;
        if self.tokens >= n {
            self.tokens -= n;
            return Duration::ZERO;
        }
        let wait = Duration::from_secs_f64((n - self.tokens) / self.rate);
        self.tokens = 0.0;
        self.last += wait;
        wait
    }

    /// Returns credit for bytes that were acquired but not sent.
    pub fn refund(&mut self, n: usize) {
        self.tokens = (self.tokens + n as f64).min(self.capacity);
    }
}

/// Stream wrapper enforcing a [`LinkProfile`] in both directions, each with
/// its own bucket.
///
/// Latency is charged once per message per direction: before the first byte
/// written after a flush, and before the first byte read after this end last
/// wrote. Bytes are never altered or reordered.
pub struct ShapedStream<S> {
    inner: S,
    profile: LinkProfile,
    up: Option<TokenBucket>,
    down: Option<TokenBucket>,
    write_fresh: bool,
    read_fresh: bool,
}

impl<S: Stream> ShapedStream<S> {
    pub fn new(inner: S, profile: LinkProfile) -> Self {
        let bucket = (!profile.bandwidth_bps.is_infinite())
            .then(|| TokenBucket::new(profile.bandwidth_bps));
        Self {
            inner,
            profile,
            up: bucket.clone(),
            down: bucket,
            write_fresh: true,
            read_fresh: true,
        }
    }

    pub fn into_inner(self) -> S {
        self.inner
    }

    fn latency(&self) {
        if self.profile.latency_s > 0.0 {
            thread::sleep(Duration::from_secs_f64(self.profile.latency_s));
        }
    }
}

/// Wraps `stream` so it obeys `profile`.
pub fn shape_stream<S: Stream>(stream: S, profile: LinkProfile) -> ShapedStream<S> {
    ShapedStream::new(stream, profile)
}

impl<S: Stream> Write for ShapedStream<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        if self.write_fresh {
            self.write_fresh = false;
            self.latency();
        }
        self.read_fresh = true;
        let Some(bucket) = self.up.as_mut() else {
            return self.inner.write(buf);
        };
        let chunk = buf.len().min(bucket.capacity().max(1));
        let wait = bucket.acquire(chunk);
        if !wait.is_zero() {
            thread::sleep(wait);
        }
        match self.inner.write(&buf[..chunk]) {
            Ok(n) => {
                bucket.refund(chunk - n);
                Ok(n)
            }
            Err(e) => {
                bucket.refund(chunk);
                Err(e)
            }
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        self.write_fresh = true;
        self.inner.flush()
    }
}

impl<S: Stream> Read for ShapedStream<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let limit = match &self.down {
            Some(b) => buf.len().min(b.capacity().max(1)),
            None => buf.len(),
        };
        let n = self.inner.read(&mut buf[..limit])?;
        if n == 0 {
            return Ok(0);
        }
        if self.read_fresh {
            self.read_fresh = false;
            self.latency();
        }
        if let Some(bucket) = self.down.as_mut() {
            let wait = bucket.acquire(n);
            if !wait.is_zero() {
                thread::sleep(wait);
            }
        }
        Ok(n)
    }
}

impl<S: Stream> Stream for ShapedStream<S> {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.inner.set_read_timeout(timeout)
    }

    fn closer(&self) -> io::Result<Closer> {
        self.inner.closer()
    }

    fn peer(&self) -> String {
        self.inner.peer()
    }
}

/// Dialer whose streams are shaped by `profile`.
pub struct ShapedDialer<D> {
    pub inner: D,
    pub profile: LinkProfile,
}

impl<D: Dialer> Dialer for ShapedDialer<D> {
    fn dial(&self) -> Result<Box<dyn Stream>, TransportError> {
        let stream = self.inner.dial()?;
        if self.profile.is_unlimited() {
            return Ok(stream);
        }
        Ok(Box::new(ShapedStream::new(stream, self.profile)))
    }

    fn address(&self) -> String {
        self.inner.address()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeProfile {
    pub slowdown: f64,
}

impl ComputeProfile {
    pub fn new(slowdown: f64) -> Result<Self, ProfileError> {
        if !(slowdown >= 1.0 && slowdown.is_finite()) {
            return Err(ProfileError::Slowdown(slowdown));
        }
        Ok(Self { slowdown })
    }

    pub fn unthrottled() -> Self {
        Self { slowdown: 1.0 }
    }

    /// Extra sleep owed after work that took `elapsed`.
    pub fn penalty(&self, elapsed: Duration) -> Duration {
        elapsed.mul_f64(self.slowdown - 1.0)
    }
}

/// Wraps `f` so each call takes `slowdown` times as long; results unchanged.
pub fn throttle_compute<A, R>(
    mut f: impl FnMut(A) -> R,
    profile: ComputeProfile,
) -> impl FnMut(A) -> R {
    move |arg| {
        let started = Instant::now();
        let out = f(arg);
        let extra = profile.penalty(started.elapsed());
        if !extra.is_zero() {
            thread::sleep(extra);
        }
        out
    }
}

/// Client whose `fit` is slowed by a [`ComputeProfile`].
pub struct ThrottledClient<C> {
    inner: C,
    profile: ComputeProfile,
}

impl<C: Client> ThrottledClient<C> {
    pub fn new(inner: C, profile: ComputeProfile) -> Self {
        Self { inner, profile }
    }

    pub fn into_inner(self) -> C {
        self.inner
    }
}

impl<C: Client> Client for ThrottledClient<C> {
    fn get_weights(&mut self) -> Result<Weights, ClientError> {
        self.inner.get_weights()
    }

    fn fit(&mut self, weights: Weights, config: &ConfigMap) -> Result<FitOutput, ClientError> {
        let inner = &mut self.inner;
        throttle_compute(|(w, c): (Weights, &ConfigMap)| inner.fit(w, c), self.profile)((
            weights, config,
        ))
    }

    fn evaluate(&self, weights: Weights, config: &ConfigMap) -> Result<EvaluateOutput, ClientError> {
        self.inner.evaluate(weights, config)
    }
}
