/// One instrumented operation invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocEvent {
    pub label: &'static str,
    /// Peak bytes of scratch buffers live inside the operation.
    pub transient_bytes: usize,
    /// Bytes of the buffer handed back to the caller.
    pub output_bytes: usize,
}

/// Byte-accurate record of the scratch memory used by instrumented operations.
///
/// Input and output buffers are never counted as transient. `peak_extra_bytes`
/// is the maximum `transient_bytes` over all recorded events.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllocationLedger {
    events: Vec<AllocEvent>,
    peak_extra_bytes: usize,
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: &'static str, transient_bytes: usize, output_bytes: usize) {
        self.peak_extra_bytes = self.peak_extra_bytes.max(transient_bytes);
        self.events.push(AllocEvent { label, transient_bytes, output_bytes });
    }

    pub fn events(&self) -> &[AllocEvent] {
        &self.events
    }

    pub fn peak_extra_bytes(&self) -> usize {
        self.peak_extra_bytes
    }

    /// Transient bytes of the most recent event with `label`.
    pub fn last(&self, label: &str) -> Option<&AllocEvent> {
        self.events.iter().rev().find(|e| e.label == label)
    }

    pub fn reset(&mut self) {
        self.events.clear();
        self.peak_extra_bytes = 0;
    }
}

/// Tracks live scratch bytes inside a single operation.
#[derive(Debug, Default)]
pub(crate) struct Scratch {
    live: usize,
    peak: usize,
}

impl Scratch {
    pub(crate) fn alloc<T: Clone>(&mut self, n: usize, fill: T) -> Vec<T> {
        self.live += n * std::mem::size_of::<T>();
        self.peak = self.peak.max(self.live);
        vec![fill; n]
    }

    /// Accounts for a buffer allocated elsewhere (e.g. returned by a helper).
    pub(crate) fn adopt<T>(&mut self, buf: &[T]) {
        self.live += std::mem::size_of_val(buf);
        self.peak = self.peak.max(self.live);
    }

    pub(crate) fn peak(&self) -> usize {
        self.peak
    }
}
