# coding: utf-8

# # Scoring three-class rain forecasts
#
# Forecasts and observations are grids of class indices: 0 no rain, 1 rain,
# 2 heavy rain. Every score comes from a one-vs-rest contingency table.

# In[1]:

import numpy as np

from postrain import dataio
from postrain.verification import contingency, evaluate_split, format_report, hss


# Rain rates (mm/h) become classes through a pair of thresholds. The Korea
# setting uses 0.1 and 10 mm/h.

# In[2]:

rain = np.array([[0.0, 0.05, 0.1], [3.0, 9.99, 10.0]])
classes = dataio.classify_rain(rain, dataio.KOREA_THRESHOLDS)
print(classes)


# A small forecast against its observation. The contingency table for the
# rain class counts hits, false alarms, correct negatives and misses.

# In[3]:

obs = np.array([[0, 1, 1, 0], [2, 1, 0, 0], [0, 0, 2, 2]])
fcst = np.array([[0, 1, 0, 0], [2, 1, 1, 0], [0, 0, 1, 2]])
print(contingency(fcst, obs, k=1))


# evaluate_split pools the counts over samples and scores each class.

# In[4]:

report = evaluate_split([fcst], [obs])
print(format_report(report, "demo"))


# Two HSS variants are reported. The alternative one only reaches 1 for a
# perfect forecast when hits equal correct negatives.

# In[5]:

perfect = contingency(obs, obs, k=2)
print(perfect, hss(perfect), hss(perfect, "alt_denominator"))


# Undefined scores (no observed or forecast events) are NaN and become null
# in JSON.

# In[6]:

empty = evaluate_split([np.zeros((2, 2), np.uint8)], [np.zeros((2, 2), np.uint8)])
print(empty.to_json()[:400])
