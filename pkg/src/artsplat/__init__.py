"""Articulated 2D Gaussian surfel rendering and reconstruction."""

from .surfel import (InvalidParameterError, Surfel, SurfelCloud, SurfelGeometry,
                     build_frame, gaussian_kernel, logit, normalize_quat,
                     quat_to_rotation, sigmoid, surfel_covariance,
                     surfel_geometry, surfel_point)
from .articulation import (MLP, Joint, JointTransforms, PoseParams, Skeleton,
                           SkinField, blend_joint_transforms, calibrate_pose,
                           corrected_skin_weights, deform_covariance,
                           deform_points, encode_position, forward_kinematics,
                           nearest_vertex_weights, wrap_axis_angle)
from .rasterizer import (Camera, PixelFragments, PosedSurfels, composite_pixel,
                         cull_and_bin, make_posed, ray_splat_intersect, render,
                         render_backward, render_oracle)
from .pipeline import pose_surfels, render_frame, render_frame_backward
from .losses import (LossWeights, l1_loss, mask_loss, psnr, ssim_loss,
                     ssim_metric, total_loss)

__version__ = "0.1.0"
