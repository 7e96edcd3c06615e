# coding: utf-8

# # Channel attention over stacked NWP variables
#
# Each input channel gets one weight in (0, 1), computed from its average
# and maximum over the grid by a shared bottleneck MLP.

# In[1]:

import torch

from postrain.cam import CamParameters, ChannelAttentionConfig, channel_attention


# 72 channels (6 lead times x 12 variables) with reduction ratio 16 give a
# hidden width of 4.

# In[2]:

cfg = ChannelAttentionConfig(channels=72, reduction_ratio=16)
print(cfg.hidden, cfg.parameter_count)
params = CamParameters.init(cfg, torch.Generator().manual_seed(0))


# With zero input and zero biases every channel gets weight 0.5.

# In[3]:

att, fused = channel_attention(torch.zeros(72, 50, 65), params)
print(att.flatten()[:5])


# Rolling the grid does not change the weights, because both pools see the
# whole field.

# In[4]:

feat = torch.randn(72, 50, 65, generator=torch.Generator().manual_seed(1))
a, _ = channel_attention(feat, params)
b, _ = channel_attention(torch.roll(feat, (7, 11), (1, 2)), params)
print(torch.allclose(a, b))


# The default merge adds the weight to every pixel of its channel; the
# gated variant multiplies instead.

# In[5]:

_, added = channel_attention(feat, params)
_, gated = channel_attention(feat, params, merge="gated_multiply")
print((added - feat)[0, :2, :2])
print((gated / feat)[0, :2, :2])
