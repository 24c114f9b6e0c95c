/// Multiply-accumulate counter. Only matrix products contribute; exp, log
/// and elementwise work are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    macs: u64,
}

impl FlopCounter {
    pub fn add(&mut self, macs: u64) {
        self.macs += macs;
    }

    pub fn count(&self) -> u64 {
        self.macs
    }

    /// MACs accumulated since `mark` was taken.
    pub fn since(&self, mark: FlopCounter) -> u64 {
        self.macs - mark.macs
    }
}
