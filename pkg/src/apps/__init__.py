"""
Command line application for medattn
"""
