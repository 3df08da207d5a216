pub mod assumptions;
pub mod fig1;
pub mod fit;
pub mod local_error;
pub mod order;
pub mod ses;
pub mod weak_error;
