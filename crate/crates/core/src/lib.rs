pub mod corridor;
pub mod ddp;
pub mod dynamics;
pub mod mpc;
pub mod reasoner;
pub mod sim;
