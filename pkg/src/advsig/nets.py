"""Small residual and TDNN backbones shared by victims and signature classifiers.

These are desk-scale analogues of ResNet34, LightResNet34, FwSE-ResNet34 and
ECAPA-TDNN: widths and depths are cut down, but each keeps its family's
defining structure. SiLU is used instead of ReLU everywhere so the models are
smooth in the input, which keeps finite-difference gradient checks meaningful.
"""

import torch
from torch import nn
import torch.nn.functional as F


def _conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class FwSE(nn.Module):
    """Frequency-wise squeeze-excitation: one gate per frequency row."""

    def __init__(self, n_freq, reduction=4):
        super().__init__()
        hidden = max(2, n_freq // reduction)
        self.fc1 = nn.Linear(n_freq, hidden)
        self.fc2 = nn.Linear(hidden, n_freq)

    def forward(self, x):
        # x: (B, C, F, T)
        s = x.mean(dim=(1, 3))
        g = torch.sigmoid(self.fc2(F.silu(self.fc1(s))))
        return x * g[:, None, :, None]


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, n_freq=None):
        super().__init__()
        self.conv1 = _conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = _conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.se = FwSE(n_freq) if n_freq is not None else None
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.silu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.se is not None:
            out = self.se(out)
        res = x if self.shortcut is None else self.shortcut(x)
        return F.silu(out + res)


def _out_len(n, stride):
    return (n - 1) // stride + 1


class ResNet2d(nn.Module):
    """Residual 2-D conv trunk over (freq, time) with mean+std pooling."""

    def __init__(self, n_mels, channels, blocks, emb_dim, fwse=False):
        super().__init__()
        self.stem = nn.Sequential(_conv3x3(1, channels[0]), nn.BatchNorm2d(channels[0]), nn.SiLU())
        layers = []
        cin, n_freq = channels[0], n_mels
        for i, (c, nb) in enumerate(zip(channels, blocks)):
            for j in range(nb):
                stride = 2 if (i > 0 and j == 0) else 1
                n_freq = _out_len(n_freq, stride)
                layers.append(BasicBlock(cin, c, stride, n_freq if fwse else None))
                cin = c
        self.layers = nn.Sequential(*layers)
        self.pool_dim = cin * n_freq
        self.embed = nn.Linear(2 * self.pool_dim, emb_dim)

    def forward(self, feats):
        x = self.layers(self.stem(feats.unsqueeze(1)))
        b, c, f, t = x.shape
        x = x.reshape(b, c * f, t)
        return self.embed(stats_pool(x))


def stats_pool(x, eps=1e-5):
    mu = x.mean(dim=-1)
    sd = torch.sqrt(((x - mu.unsqueeze(-1)) ** 2).mean(dim=-1) + eps)
    return torch.cat([mu, sd], dim=-1)


class SERes2Block(nn.Module):
    def __init__(self, channels, kernel, dilation, scale=4, se_dim=16):
        super().__init__()
        assert channels % scale == 0
        width = channels // scale
        self.scale = scale
        self.pre = nn.Sequential(nn.Conv1d(channels, channels, 1), nn.SiLU(), nn.BatchNorm1d(channels))
        pad = dilation * (kernel - 1) // 2
        self.convs = nn.ModuleList(
            nn.Sequential(nn.Conv1d(width, width, kernel, dilation=dilation, padding=pad), nn.SiLU(), nn.BatchNorm1d(width))
            for _ in range(scale - 1)
        )
        self.post = nn.Sequential(nn.Conv1d(channels, channels, 1), nn.SiLU(), nn.BatchNorm1d(channels))
        self.se1 = nn.Linear(channels, se_dim)
        self.se2 = nn.Linear(se_dim, channels)

    def forward(self, x):
        out = self.pre(x)
        chunks = torch.chunk(out, self.scale, dim=1)
        ys = [chunks[0]]
        prev = None
        for k, conv in enumerate(self.convs):
            inp = chunks[k + 1] if prev is None else chunks[k + 1] + prev
            prev = conv(inp)
            ys.append(prev)
        out = self.post(torch.cat(ys, dim=1))
        gate = torch.sigmoid(self.se2(F.silu(self.se1(out.mean(dim=-1)))))
        return x + out * gate.unsqueeze(-1)


class AttentiveStatsPool(nn.Module):
    def __init__(self, channels, hidden=32):
        super().__init__()
        self.att1 = nn.Conv1d(channels, hidden, 1)
        self.att2 = nn.Conv1d(hidden, channels, 1)

    def forward(self, x, eps=1e-5):
        w = torch.softmax(self.att2(torch.tanh(self.att1(x))), dim=-1)
        mu = (w * x).sum(dim=-1)
        var = (w * (x - mu.unsqueeze(-1)) ** 2).sum(dim=-1)
        return torch.cat([mu, torch.sqrt(var + eps)], dim=-1)


class EcapaTdnn(nn.Module):
    """1-D TDNN with SE-Res2 blocks, multi-layer aggregation and attentive pooling."""

    def __init__(self, n_mels, channels, emb_dim, dilations=(2, 3, 4), mfa_channels=None):
        super().__init__()
        mfa_channels = mfa_channels or 2 * channels
        self.stem = nn.Sequential(nn.Conv1d(n_mels, channels, 5, padding=2), nn.SiLU(), nn.BatchNorm1d(channels))
        self.blocks = nn.ModuleList(SERes2Block(channels, 3, d) for d in dilations)
        self.mfa = nn.Sequential(nn.Conv1d(channels * len(dilations), mfa_channels, 1), nn.SiLU())
        self.pool = AttentiveStatsPool(mfa_channels)
        self.pool_bn = nn.BatchNorm1d(2 * mfa_channels)
        self.embed = nn.Linear(2 * mfa_channels, emb_dim)

    def forward(self, feats):
        x = self.stem(feats)
        outs = []
        for blk in self.blocks:
            x = blk(x)
            outs.append(x)
        x = self.mfa(torch.cat(outs, dim=1))
        return self.embed(self.pool_bn(self.pool(x)))


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def graph_signature(module):
    """Stable text description of the layer graph (module types and parameter shapes)."""
    lines = []
    for name, sub in module.named_modules():
        shapes = [tuple(p.shape) for p in sub.parameters(recurse=False)]
        lines.append(f"{name}:{type(sub).__name__}:{shapes}")
    return "\n".join(lines)
