pub mod backward;
pub mod forward;
pub mod loss;

pub use backward::{
    apply_color_calibration, backprop_color_calibration, backward_rasterize, gradcheck,
    GradcheckLoss, GradcheckReport, OutputGradients, ParamGradients,
};
pub use forward::{
    depth_sort_and_cull, prepare_splats, project_mean, projection_jacobian, rasterize,
    splat_covariance, RasterConfig, RenderOutput, SplattedGaussian, TileGrid,
};
pub use loss::{image_loss, l1_mean_and_grad, ssim_mean, ssim_mean_and_grad};
