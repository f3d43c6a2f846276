"""What the two MoClip ingredients do to a single update.

1. Angle clipping: a gradient that points away from the running momentum is
   turned back to within the allowed angle.
2. atan2 scaling: the per-coordinate step saturates at alpha*pi/2 instead of
   blowing up when the second moment is tiny.
"""

import math

import numpy as np

from logits_replay.optim import adam_step, angle_clip, atan2_step, vector_angle

m = np.array([1.0, 0.0])
delta = math.radians(45)
print("angle clipping with a 45 degree cap, momentum along x")
for deg in (30, 60, 120, 179):
    g = 2.0 * np.array([math.cos(math.radians(deg)), math.sin(math.radians(deg))])
    for mode in ("rotate_preserve_norm", "shrink_perpendicular"):
        out, diag = angle_clip(g, m, delta, mode)
        print(f"  {deg:3d} deg  {mode:<21} -> {math.degrees(vector_angle(out, m)):6.1f} deg, "
              f"|g'| = {np.linalg.norm(out):.3f}, clipped={diag.clipped}, degenerate={diag.degenerate}")

print("\nstep size per coordinate, alpha = 1e-3")
alpha = 1e-3
m_hat = np.array([1e-4, 1e-2, 1.0, 1.0])
v_hat = np.array([1.0, 1e-4, 1e-6, 0.0])
print("  m_hat      v_hat      atan2 step   adam step (eps=1e-8)")
for mh, vh, a, b in zip(m_hat, v_hat, atan2_step(m_hat, v_hat, alpha), adam_step(m_hat, v_hat, alpha, 1e-8)):
    print(f"  {mh:9.1e}  {vh:9.1e}  {a:11.3e}  {b:11.3e}")
print(f"  bound alpha*pi/2 = {alpha * math.pi / 2:.3e}")
