pub mod codec;
pub mod memcalc;
pub mod optim;
pub mod par;
pub mod shard;
pub mod stream;
pub mod swarm;
pub mod tasks;
pub mod tensor;
