//! Library surface of the `cpnn` binary: the CPNN-JSON / DSET-JSON codecs,
//! shared with the integration tests.

pub mod format;
