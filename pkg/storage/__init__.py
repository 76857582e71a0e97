"""
Readers and writers for the files exchanged between pipeline stages.
"""
